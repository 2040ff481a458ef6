use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::Image;

/// Photometric perturbations drawn independently per view. Geometry is never
/// changed between views; the optional flip is shared by both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Additive offset drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor range about the image mean.
    pub contrast: [f32; 2],
    /// Upper bound of the per-view Gaussian noise level.
    pub noise_sigma: f32,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.2,
            contrast: [0.8, 1.25],
            noise_sigma: 0.02,
            flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: [1.0, 1.0],
            noise_sigma: 0.0,
            flip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    /// Whether both views were mirrored; boxes must then go through `BBox::flip_horizontal`.
    pub flipped: bool,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn perturb(base: &Image, mean: f32, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let b = uniform(rng, -cfg.brightness, cfg.brightness);
    let c = uniform(rng, cfg.contrast[0], cfg.contrast[1]);
    let sigma = uniform(rng, 0.0, cfg.noise_sigma);
    let shift = (1.0 - c) * mean + b;
    let mut out = base.clone();
    for v in out.pixels_mut() {
        *v = *v * c + shift;
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0f32, sigma).expect("valid sigma");
        for v in out.pixels_mut() {
            *v += noise.sample(rng);
        }
    }
    out.clamp_unit();
    out
}

pub fn two_view_augment(image: &Image, seed: u64, cfg: &AugmentConfig) -> ViewPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = cfg.flip && rng.random_bool(0.5);
    let base = if flipped { image.flip_horizontal() } else { image.clone() };
    let mean = base.pixels().iter().map(|&v| v as f64).sum::<f64>() as f32 / base.pixels().len() as f32;
    let view1 = perturb(&base, mean, cfg, &mut rng);
    let view2 = perturb(&base, mean, cfg, &mut rng);
    ViewPair {
        view1,
        view2,
        flipped,
    }
}
