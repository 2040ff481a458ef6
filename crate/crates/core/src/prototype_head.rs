//! Per-location prototype distributions, presence scores and activation maps.

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Array};
use crate::raster::resample_grid;

/// Softmaxed feature grid; `values` has shape `[h', w', D]` and sums to one over D.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Array,
}

impl ProtoGrid {
    pub fn new(width: usize, height: usize, values: Array) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != height || values.shape()[1] != width {
            return Err(Error::shape(format!(
                "proto grid values {:?} do not match {width}x{height}",
                values.shape()
            )));
        }
        let channels = values.shape()[2];
        Ok(ProtoGrid {
            width,
            height,
            channels,
            values,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, d: usize) -> f32 {
        self.values.data()[(y * self.width + x) * self.channels + d]
    }

    /// Channel `d` as a row-major `h' x w'` slice.
    pub fn channel(&self, d: usize) -> Result<Vec<f32>> {
        if d >= self.channels {
            return Err(Error::Index {
                what: "prototype",
                index: d,
                len: self.channels,
            });
        }
        Ok(self.values.data().iter().skip(d).step_by(self.channels).copied().collect())
    }
}

pub fn channel_softmax(z: &FeatureGrid) -> Result<ProtoGrid> {
    ProtoGrid::new(z.width, z.height, softmax(&z.values, 2)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresenceVector {
    pub p: Vec<f32>,
    /// `(x, y)` grid cell of each channel's maximum.
    pub argmax_locations: Vec<(usize, usize)>,
}

impl PresenceVector {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Max over locations per channel; ties go to the first cell in row-major order.
pub fn presence_pool(g: &ProtoGrid) -> PresenceVector {
    let mut p = vec![f32::NEG_INFINITY; g.channels];
    let mut loc = vec![(0, 0); g.channels];
    for y in 0..g.height {
        for x in 0..g.width {
            for d in 0..g.channels {
                let v = g.at(x, y, d);
                if v > p[d] {
                    p[d] = v;
                    loc[d] = (x, y);
                }
            }
        }
    }
    PresenceVector {
        p,
        argmax_locations: loc,
    }
}

/// Prototype `d` upsampled to pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub prototype: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major raster in `[0, 1]`.
    pub values: Vec<f32>,
}

impl ActivationMap {
    pub fn new(prototype: usize, width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "activation raster of {} values for {width}x{height}",
                values.len()
            )));
        }
        Ok(ActivationMap {
            prototype,
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Bilinear (corner-aligned) upsampling of channel `d` to `target = (W, H)`, clamped to `[0, 1]`.
pub fn activation_map(g: &ProtoGrid, d: usize, target: (usize, usize)) -> Result<ActivationMap> {
    let channel: Vec<f64> = g.channel(d)?.into_iter().map(f64::from).collect();
    let raster = resample_grid(&channel, (g.width, g.height), target);
    ActivationMap::new(
        d,
        target.0,
        target.1,
        raster.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn grid(w: usize, h: usize, d: usize, f: impl Fn(usize, usize, usize) -> f32) -> ProtoGrid {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..d {
                    data.push(f(x, y, c));
                }
            }
        }
        ProtoGrid::new(w, h, Array::new(vec![h, w, d], data).unwrap()).unwrap()
    }

    fn features(w: usize, h: usize, d: usize, data: Vec<f32>) -> FeatureGrid {
        FeatureGrid::from_tokens(Array::new(vec![w * h, d], data).unwrap(), w, h).unwrap()
    }

    #[test]
    fn zero_logits_are_uniform() {
        let g = channel_softmax(&features(3, 2, 4, vec![0.0; 24])).unwrap();
        assert!(g.values.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn shift_invariance_per_location() {
        let base: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).sin()).collect();
        let mut shifted = base.clone();
        for v in &mut shifted[4..8] {
            *v += 3.0;
        }
        let a = channel_softmax(&features(2, 1, 4, base)).unwrap();
        let b = channel_softmax(&features(2, 1, 4, shifted)).unwrap();
        assert!(a.values.max_abs_diff(&b.values) < 1e-6);
    }

    #[test]
    fn logits_one_two_three() {
        let g = channel_softmax(&features(1, 1, 3, vec![1.0, 2.0, 3.0])).unwrap();
        let want = softmax(&Array::<f64>::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        for (a, b) in g.values.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!((g.values.data()[2] - 0.665).abs() < 1e-3);
    }

    #[test]
    fn pooling_examples() {
        let uniform = grid(3, 3, 4, |_, _, _| 0.25);
        let p = presence_pool(&uniform);
        assert!(p.p.iter().all(|&v| v == 0.25));
        assert!(p.argmax_locations.iter().all(|&l| l == (0, 0)));

        let onehot = grid(3, 3, 2, |x, y, c| if (x, y) == (2, 1) { [1.0, 0.0][c] } else { [0.0, 1.0][c] });
        let p = presence_pool(&onehot);
        assert_eq!(p.p[0], 1.0);
        assert_eq!(p.argmax_locations[0], (2, 1));

        // 2x2, single channel, row-major values 0.1 0.4 / 0.3 0.2
        let vals = [0.1, 0.4, 0.3, 0.2];
        let g = grid(2, 2, 1, |x, y, _| vals[y * 2 + x]);
        let p = presence_pool(&g);
        let (best, at) = (0..4).fold((f32::MIN, 0), |(b, i), j| if vals[j] > b { (vals[j], j) } else { (b, i) });
        assert_eq!(p.p[0], best);
        assert_eq!(p.argmax_locations[0], (at % 2, at / 2));
        // (x, y) = (1, 0): second column of the first row
        assert_eq!(p.argmax_locations[0], (1, 0));
    }

    #[test]
    fn activation_map_examples() {
        let g = grid(3, 2, 2, |x, y, c| (x + 3 * y + c) as f32 / 10.0);
        let same = activation_map(&g, 1, (3, 2)).unwrap();
        assert_eq!(same.values, g.channel(1).unwrap());

        let constant = grid(2, 2, 1, |_, _, _| 0.37);
        let m = activation_map(&constant, 0, (9, 5)).unwrap();
        assert!(m.values.iter().all(|&v| (v - 0.37).abs() < 1e-6));

        let corner = grid(2, 2, 1, |x, y, _| if (x, y) == (1, 1) { 1.0 } else { 0.0 });
        let m = activation_map(&corner, 0, (4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = (x as f32 / 3.0) * (y as f32 / 3.0);
                assert!((m.get(x, y) - want).abs() < 1e-6);
            }
        }
        assert_eq!(m.get(3, 3), 1.0);
        assert_eq!(m.max(), 1.0);

        assert!(matches!(activation_map(&corner, 1, (4, 4)), Err(Error::Index { .. })));
    }

    #[test]
    fn raster_max_matches_presence_when_cells_land_on_pixels() {
        // (64 - 1) / (8 - 1) = 9: every grid cell maps onto a pixel exactly.
        let g = grid(8, 8, 3, |x, y, c| ((x * 5 + y * 3 + c * 7) % 13) as f32 / 13.0);
        let p = presence_pool(&g);
        for d in 0..3 {
            let m = activation_map(&g, d, (64, 64)).unwrap();
            assert!((m.max() - p.p[d]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn presence_strictly_inside_unit_interval(data in proptest::collection::vec(-8.0f32..8.0, 2 * 3 * 5)) {
            let g = channel_softmax(&features(2, 3, 5, data)).unwrap();
            let p = presence_pool(&g);
            for (d, &v) in p.p.iter().enumerate() {
                prop_assert!(v > 0.0 && v < 1.0);
                let (x, y) = p.argmax_locations[d];
                prop_assert_eq!(g.at(x, y, d), v);
            }
            for cell in g.values.data().chunks(5) {
                let s: f64 = cell.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn activation_map_is_monotone(a in proptest::collection::vec(0.0f32..0.5, 9), bump in proptest::collection::vec(0.0f32..0.5, 9)) {
            let g = grid(3, 3, 2, |x, y, c| {
                let i = y * 3 + x;
                if c == 0 { a[i] } else { a[i] + bump[i] }
            });
            let lo = activation_map(&g, 0, (7, 7)).unwrap();
            let hi = activation_map(&g, 1, (7, 7)).unwrap();
            for (l, h) in lo.values.iter().zip(&hi.values) {
                prop_assert!(h >= l);
            }
        }
    }
}
