use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::par::{self, Exec};
use crate::prototype_head::ActivationMap;

pub const AP_DEFINITION: &str =
    "area under the monotone precision envelope of the scale-sweep PR points, trapezoidal in recall from 0";

/// A connected highlighted area of an activation map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: BBox,
    /// Mean pixel-centre position `(x, y)`.
    pub centroid: (f64, f64),
    pub area: usize,
}

/// Pixels at or above `tau * max(map)`, grouped by 8-connectivity, largest first
/// (ties keep raster discovery order).
pub fn regions_from_activation(map: &ActivationMap, tau: f64) -> Result<Vec<Region>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Precondition(format!("tau must lie in (0, 1], got {tau}")));
    }
    let peak = map.max();
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let (w, h) = (map.width, map.height);
    let cut = (tau * peak as f64) as f32;
    let on: Vec<bool> = map.values.iter().map(|&v| v >= cut).collect();
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut sx, mut sy, mut area) = (0.0, 0.0, 0usize);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            area += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        regions.push(Region {
            bbox: BBox::new(x0, y0, x1, y1)?,
            centroid: (sx / area as f64, sy / area as f64),
            area,
        });
    }
    regions.sort_by(|a, b| b.area.cmp(&a.area));
    Ok(regions)
}

fn scale_span(lo: usize, hi: usize, s: f64, bound: usize) -> (usize, usize) {
    let centre = (lo + hi) as f64 / 2.0;
    let len = ((s * (hi - lo) as f64).round() as i64).max(1);
    let start = (centre - len as f64 / 2.0).round() as i64;
    let end = start + len;
    let a = start.clamp(0, bound as i64 - 1) as usize;
    let b = end.clamp(a as i64 + 1, bound as i64) as usize;
    (a, b)
}

/// Each region's tight box scaled by `s` about its centre, rounded to whole
/// pixels (at least one), clipped to a `width x height` image.
pub fn boxes_at_scale(regions: &[Region], s: f64, (width, height): (usize, usize)) -> Result<Vec<BBox>> {
    if !(s > 0.0) {
        return Err(Error::Precondition(format!("scale must be positive, got {s}")));
    }
    regions
        .iter()
        .map(|r| {
            let (x0, x1) = scale_span(r.bbox.x_min, r.bbox.x_max, s, width);
            let (y0, y1) = scale_span(r.bbox.y_min, r.bbox.y_max, s, height);
            BBox::new(x0, y0, x1, y1)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    /// Ground-truth boxes hit by at least one prediction.
    pub tp: usize,
    /// Predictions hitting no ground truth.
    pub fp: usize,
    /// Ground-truth boxes hit by no prediction.
    pub fn_: usize,
    /// Predictions hitting at least one ground-truth box.
    pub matched_pred: usize,
}

impl MatchCounts {
    fn add(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.matched_pred += o.matched_pred;
    }
}

/// Overlap test: positive intersection area that also covers at least
/// `min_overlap` of the ground-truth box.
fn hits(pred: &BBox, gt: &BBox, min_overlap: f64) -> bool {
    let inter = pred.intersection_area(gt);
    inter > 0 && inter as f64 >= min_overlap * gt.area() as f64
}

pub fn match_boxes(pred: &[BBox], gt: &[BBox], min_overlap: f64) -> MatchCounts {
    let tp = gt.iter().filter(|g| pred.iter().any(|p| hits(p, g, min_overlap))).count();
    let matched_pred = pred.iter().filter(|p| gt.iter().any(|g| hits(p, g, min_overlap))).count();
    MatchCounts {
        tp,
        fp: pred.len() - matched_pred,
        fn_: gt.len() - tp,
        matched_pred,
    }
}

/// Fixed highlighted regions of one image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCase {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
    pub gt: Vec<BBox>,
}

impl DetectionCase {
    pub fn from_map(map: &ActivationMap, gt: Vec<BBox>, tau: f64) -> Result<Self> {
        Ok(DetectionCase {
            width: map.width,
            height: map.height,
            regions: regions_from_activation(map, tau)?,
            gt,
        })
    }
}

/// The same number of regions with the same box sizes, placed uniformly at random inside the image.
pub fn random_centroid_case<R: Rng>(case: &DetectionCase, rng: &mut R) -> DetectionCase {
    let regions = case
        .regions
        .iter()
        .map(|r| {
            let (w, h) = (r.bbox.width(), r.bbox.height());
            let x0 = rng.random_range(0..=case.width - w);
            let y0 = rng.random_range(0..=case.height - h);
            let bbox = BBox::new(x0, y0, x0 + w, y0 + h).expect("non-empty box");
            let (cx, cy) = bbox.center();
            Region {
                bbox,
                centroid: (cx, cy),
                area: r.area,
            }
        })
        .collect();
    DetectionCase {
        regions,
        ..case.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub scale: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrPoint {
    pub fn from_counts(scale: f64, c: MatchCounts) -> Self {
        let predicted = c.matched_pred + c.fp;
        let gt = c.tp + c.fn_;
        let precision = if predicted == 0 { 1.0 } else { c.matched_pred as f64 / predicted as f64 };
        let recall = if gt == 0 { 1.0 } else { c.tp as f64 / gt as f64 };
        PrPoint {
            scale,
            precision,
            recall,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

/// `0.2, 0.3, ..., 10.0` (99 values).
pub fn default_scales() -> Vec<f64> {
    (2..=100).map(|i| i as f64 / 10.0).collect()
}

/// Counts per scale summed over all cases before forming precision and recall.
pub fn pr_sweep(cases: &[DetectionCase], scales: &[f64], min_overlap: f64, exec: Exec) -> Result<Vec<PrPoint>> {
    if scales.is_empty() {
        return Err(Error::Precondition("at least one scale is required".into()));
    }
    let per_case: Vec<Vec<MatchCounts>> = par::map(exec, cases, |c| -> Result<Vec<MatchCounts>> {
        scales
            .iter()
            .map(|&s| Ok(match_boxes(&boxes_at_scale(&c.regions, s, (c.width, c.height))?, &c.gt, min_overlap)))
            .collect()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut total = MatchCounts::default();
            for c in &per_case {
                total.add(c[i]);
            }
            PrPoint::from_counts(s, total)
        })
        .collect())
}

pub fn average_precision(points: &[PrPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Precondition("average precision needs at least one point".into()));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut env = vec![0.0; pts.len()];
    let mut best = f64::NEG_INFINITY;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        env[i] = best;
    }
    let mut area = 0.0;
    let (mut r_prev, mut p_prev) = (0.0, env[0]);
    for (i, &(r, _)) in pts.iter().enumerate() {
        area += (r - r_prev) * (p_prev + env[i]) / 2.0;
        r_prev = r;
        p_prev = env[i];
    }
    Ok(area)
}
