use std::f32::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoxRecord, LabelName, LabelRecord, Split, BOXES_MANIFEST, LABELS_MANIFEST};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::par::{self, Exec};
use crate::raster::{save_gray8, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    /// Clean image, no lesions and no boxes.
    None,
    /// Smooth bright disc, a drusen stand-in.
    BrightBlob,
    /// Flattened dark ellipse, a fluid-pocket stand-in.
    DarkEllipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionRecipe {
    pub name: String,
    pub kind: LesionKind,
    /// Peak gray-level change at the lesion centre.
    #[serde(default = "default_amplitude")]
    pub amplitude: f32,
}

fn default_amplitude() -> f32 {
    0.6
}

impl LesionRecipe {
    pub fn new(name: &str, kind: LesionKind) -> Self {
        LesionRecipe {
            name: name.into(),
            kind,
            amplitude: default_amplitude(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Patch size of the encoder the images are meant for; `image_size` must be a multiple.
    pub patch_size: usize,
    pub classes: Vec<LesionRecipe>,
    /// Inclusive range of lesions per lesion-class image.
    pub lesions_per_image: [usize; 2],
    /// Range of lesion radii in pixels.
    pub lesion_radius: [f32; 2],
    pub noise_sigma: f32,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            patch_size: 8,
            classes: vec![
                LesionRecipe::new("normal", LesionKind::None),
                LesionRecipe::new("drusen", LesionKind::BrightBlob),
            ],
            lesions_per_image: [2, 5],
            lesion_radius: [4.0, 7.0],
            noise_sigma: 0.02,
            counts: SplitCounts {
                train: 200,
                val: 50,
                test: 50,
            },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.classes.is_empty() {
            return bad("at least one class recipe is required".into());
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() || names.iter().any(|n| n.is_empty()) {
            return bad("class names must be non-empty and unique".into());
        }
        let [lo, hi] = self.lesions_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("lesions_per_image [{lo}, {hi}] must be a non-empty range starting at 1 or more"));
        }
        let [rlo, rhi] = self.lesion_radius;
        if !(rlo >= 1.0 && rlo <= rhi) || 2.0 * rhi >= self.image_size as f32 {
            return bad(format!("lesion_radius [{rlo}, {rhi}] must satisfy 1 <= lo <= hi < image_size/2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if Split::ALL.iter().any(|&s| self.counts.get(s) == 0) {
            return bad("every split count must be positive".into());
        }
        Ok(())
    }
}

/// A rendered image together with the lesion-free image it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: Image,
    /// Same texture and noise, no lesions.
    pub background: Image,
    pub boxes: Vec<BBox>,
}

fn smoothstep(t: f32) -> f32 {
    1.0 / (1.0 + (-t).exp())
}

fn layered_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let h = size as f32;
    let top = h * rng.random_range(0.3..0.5);
    let wobble = rng.random_range(0.5..3.0f32);
    let period = h * rng.random_range(0.6..1.6f32);
    let phase = rng.random_range(0.0..2.0 * PI);
    let thickness = [
        h * rng.random_range(0.10..0.14),
        h * rng.random_range(0.14..0.20),
        h * rng.random_range(0.04..0.07),
    ];
    let mut levels = [0.10f32, 0.45, 0.28, 0.60, 0.18];
    for l in &mut levels {
        *l += rng.random_range(-0.03..0.03);
    }
    let mut out = vec![0.0; size * size];
    for x in 0..size {
        let mut edge = top + wobble * (2.0 * PI * (x as f32 + 0.5) / period + phase).sin();
        let mut edges = [0.0f32; 4];
        edges[0] = edge;
        for (i, t) in thickness.iter().enumerate() {
            edge += t;
            edges[i + 1] = edge;
        }
        for y in 0..size {
            let yc = y as f32 + 0.5;
            let mut v = levels[0];
            for (i, e) in edges.iter().enumerate() {
                v += (levels[i + 1] - levels[i]) * smoothstep((yc - e) / 0.75);
            }
            out[y * size + x] = v;
        }
    }
    out
}

fn add_lesion(pixels: &mut [f32], size: usize, kind: LesionKind, amplitude: f32, centre: (f32, f32), radius: f32) -> Option<BBox> {
    let (rx, ry, sign) = match kind {
        LesionKind::None => return None,
        LesionKind::BrightBlob => (radius, radius, 1.0),
        LesionKind::DarkEllipse => (radius, (0.6 * radius).max(1.0), -1.0),
    };
    let (cx, cy) = centre;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let ys = (cy - ry).floor().max(0.0) as usize..((cy + ry).ceil() as usize).min(size);
    for y in ys {
        let xs = (cx - rx).floor().max(0.0) as usize..((cx + rx).ceil() as usize).min(size);
        for x in xs {
            let dx = (x as f32 + 0.5 - cx) / rx;
            let dy = (y as f32 + 0.5 - cy) / ry;
            let rho2 = dx * dx + dy * dy;
            if rho2 < 1.0 {
                let fall = 1.0 - rho2;
                pixels[y * size + x] += sign * amplitude * fall * fall;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox::new(x0, y0, x1, y1).ok()
}

/// Renders one sample of class `class` from its own seed.
///
/// The background texture and noise are drawn before any lesion, so the
/// returned `background` is exactly the image minus its lesions.
pub fn render_sample(spec: &SyntheticSpec, class: usize, sample_seed: u64) -> Result<RenderedSample> {
    let recipe = spec.classes.get(class).ok_or(Error::Index {
        what: "class",
        index: class,
        len: spec.classes.len(),
    })?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut base = layered_background(size, &mut rng);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).expect("valid sigma");
        for v in &mut base {
            *v += noise.sample(&mut rng);
        }
    }
    let mut lesioned = base.clone();
    let mut boxes = Vec::new();
    if recipe.kind != LesionKind::None {
        let count = rng.random_range(spec.lesions_per_image[0]..=spec.lesions_per_image[1]);
        for _ in 0..count {
            let [rlo, rhi] = spec.lesion_radius;
            let r = if rlo < rhi { rng.random_range(rlo..rhi) } else { rlo };
            let cx = rng.random_range(r..size as f32 - r);
            let cy = rng.random_range(r..size as f32 - r);
            let amp = recipe.amplitude * rng.random_range(0.8..1.2);
            if let Some(b) = add_lesion(&mut lesioned, size, recipe.kind, amp, (cx, cy), r) {
                boxes.push(b);
            }
        }
    }
    let mut image = Image::new(size, size, lesioned)?;
    let mut background = Image::new(size, size, base)?;
    image.clamp_unit();
    background.clamp_unit();
    Ok(RenderedSample {
        image,
        background,
        boxes,
    })
}

struct Planned {
    index: usize,
    label: usize,
    rel: String,
}

fn plan(spec: &SyntheticSpec) -> Vec<Planned> {
    let k = spec.classes.len();
    let mut out = Vec::with_capacity(spec.counts.total());
    for split in Split::ALL {
        for j in 0..spec.counts.get(split) {
            out.push(Planned {
                index: out.len(),
                label: j % k,
                rel: format!("{split}/{j:04}.png"),
            });
        }
    }
    out
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Writes `train/`, `val/` and `test/` PNG folders plus both manifests under `out`.
///
/// Sample `i` (counted across splits in train, val, test order) is rendered
/// from seed `spec.seed ^ i`; classes are assigned round-robin within each
/// split so class counts per split differ by at most one.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out: &Path, exec: Exec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    for split in Split::ALL {
        let dir = out.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let planned = plan(spec);
    let rendered = par::map(exec, &planned, |p| -> Result<Vec<BBox>> {
        let s = render_sample(spec, p.label, spec.seed ^ p.index as u64)?;
        save_gray8(&s.image, &out.join(&p.rel))?;
        Ok(s.boxes)
    });
    let mut labels = Vec::with_capacity(planned.len());
    let mut boxes = Vec::with_capacity(planned.len());
    let mut files = Vec::with_capacity(planned.len());
    for (p, b) in planned.iter().zip(rendered) {
        let name = LabelName::Name(spec.classes[p.label].name.clone());
        labels.push(LabelRecord {
            path: p.rel.clone(),
            label: name.clone(),
        });
        boxes.push(BoxRecord {
            path: p.rel.clone(),
            label: name,
            boxes: b?,
        });
        files.push(out.join(&p.rel));
    }
    write_lines(&out.join(LABELS_MANIFEST), &labels)?;
    write_lines(&out.join(BOXES_MANIFEST), &boxes)?;
    Ok(files)
}
