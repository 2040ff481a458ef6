//! Axis-aligned pixel boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel box: covers columns `x_min..x_max` and rows `y_min..y_max`.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Precondition(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) as f64 / 2.0, (self.y_min + self.y_max) as f64 / 2.0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }

    /// Positive-area overlap.
    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// The same pixels after mirroring an image of the given width.
    pub fn flip_horizontal(&self, width: usize) -> BBox {
        BBox {
            x_min: width - self.x_max,
            x_max: width - self.x_min,
            ..*self
        }
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [i64; 4]) -> std::result::Result<Self, String> {
        if v.iter().any(|&c| c < 0) {
            return Err(format!("negative box coordinate in {v:?}"));
        }
        BBox::new(v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize).map_err(|e| e.to_string())
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64]
    }
}
