//! Decision evidence for single images: most active prototypes, the exact
//! additive scoring sheet, and heatmap overlays.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{transform, SparseClassifier};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::prototype_head::{ActivationMap, PresenceVector};
use crate::raster::{save_rgb8, Image};

/// Prototypes whose largest class weight does not exceed this are left out of explanations.
pub const DEFAULT_ELIGIBILITY: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPrototype {
    pub id: usize,
    pub presence: f32,
    /// Grid cell `(x, y)` of the prototype's maximum.
    pub location: (usize, usize),
    /// `w_{id,k}` for every class.
    pub weights: Vec<f32>,
}

fn eligible(c: &SparseClassifier, d: usize, threshold: f32) -> bool {
    (0..c.classes()).any(|k| c.weight(d, k) > threshold)
}

/// Up to `k` eligible prototypes by presence, highest first, ties by id.
pub fn top_prototypes(presence: &PresenceVector, c: &SparseClassifier, k: usize, threshold: f32) -> Result<Vec<TopPrototype>> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    let mut ids: Vec<usize> = (0..presence.len()).filter(|&d| eligible(c, d, threshold)).collect();
    ids.sort_by(|&a, &b| presence.p[b].total_cmp(&presence.p[a]).then(a.cmp(&b)));
    Ok(ids
        .into_iter()
        .take(k)
        .map(|d| TopPrototype {
            id: d,
            presence: presence.p[d],
            location: presence.argmax_locations[d],
            weights: (0..c.classes()).map(|j| c.weight(d, j)).collect(),
        })
        .collect())
}

pub fn topk_prototypes(model: &Model, image: &Image, k: usize) -> Result<Vec<TopPrototype>> {
    let inf = model.infer(image)?;
    top_prototypes(&inf.presence, &model.classifier, k, DEFAULT_ELIGIBILITY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub evidence: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub id: usize,
    pub presence: f64,
    pub location: [usize; 2],
    /// `p_d * w_{d,k}` keyed by class name.
    pub contributions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringSheet {
    /// Name of the highest-scoring class.
    pub prediction: String,
    pub classes: Vec<ClassEntry>,
    pub prototypes: Vec<PrototypeEntry>,
}

impl ScoringSheet {
    pub fn predicted_index(&self) -> usize {
        let scores: Vec<f64> = self.classes.iter().map(|c| c.score).collect();
        argmax(&scores)
    }
}

/// Sheet for a given presence vector; evidence is accumulated from the listed contributions.
pub fn sheet_from_presence(presence: &PresenceVector, c: &SparseClassifier) -> Result<ScoringSheet> {
    if presence.len() != c.prototypes() {
        return Err(Error::shape(format!(
            "presence of length {} for {} prototypes",
            presence.len(),
            c.prototypes()
        )));
    }
    let names = &c.class_names;
    let mut evidence = vec![0.0f64; c.classes()];
    let mut prototypes = Vec::with_capacity(presence.len());
    for d in 0..presence.len() {
        let p = presence.p[d] as f64;
        let mut contributions = BTreeMap::new();
        for (k, name) in names.iter().enumerate() {
            let v = p * c.weight(d, k) as f64;
            evidence[k] += v;
            contributions.insert(name.clone(), v);
        }
        let (x, y) = presence.argmax_locations[d];
        prototypes.push(PrototypeEntry {
            id: d,
            presence: p,
            location: [x, y],
            contributions,
        });
    }
    let classes: Vec<ClassEntry> = names
        .iter()
        .zip(&evidence)
        .map(|(name, &e)| ClassEntry {
            name: name.clone(),
            evidence: e,
            score: transform(e, c.reg_order),
        })
        .collect();
    let scores: Vec<f64> = classes.iter().map(|c| c.score).collect();
    Ok(ScoringSheet {
        prediction: names[argmax(&scores)].clone(),
        classes,
        prototypes,
    })
}

pub fn scoring_sheet(model: &Model, image: &Image) -> Result<ScoringSheet> {
    sheet_from_presence(&model.infer(image)?.presence, &model.classifier)
}

/// Overlay colour (RGB) and the opacity used for a map value of 1.
pub const OVERLAY_RGB: [f32; 3] = [1.0, 0.25, 0.0];
pub const MAX_OPACITY: f32 = 0.6;

/// Grayscale base with the map alpha-blended in a single hue, as interleaved RGB in `[0, 1]`.
pub fn heatmap_rgb(image: &Image, map: &ActivationMap) -> Result<Vec<f32>> {
    if (map.width, map.height) != (image.width(), image.height()) {
        return Err(Error::shape(format!(
            "activation map {}x{} does not match image {}x{}",
            map.width,
            map.height,
            image.width(),
            image.height()
        )));
    }
    let mut out = Vec::with_capacity(image.pixels().len() * 3);
    for (&g, &a) in image.pixels().iter().zip(&map.values) {
        let alpha = MAX_OPACITY * a.clamp(0.0, 1.0);
        let g = g.clamp(0.0, 1.0);
        for c in OVERLAY_RGB {
            out.push((1.0 - alpha) * g + alpha * c);
        }
    }
    Ok(out)
}

pub fn render_heatmap(image: &Image, map: &ActivationMap, out: &Path) -> Result<()> {
    let rgb = heatmap_rgb(image, map)?;
    save_rgb8(image.width(), image.height(), &rgb, out)
}

/// Pixel position of grid point `(x, y)` under the corner-aligned mapping used by activation maps.
pub fn grid_to_pixel((x, y): (usize, usize), grid: (usize, usize), image: (usize, usize)) -> (usize, usize) {
    let map = |i: usize, g: usize, n: usize| {
        if g <= 1 {
            (n - 1) / 2
        } else {
            ((i as f64) * (n - 1) as f64 / (g - 1) as f64).round() as usize
        }
    };
    (map(x, grid.0, image.0), map(y, grid.1, image.1))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Array;

    fn presence(p: Vec<f32>) -> PresenceVector {
        let n = p.len();
        PresenceVector {
            p,
            argmax_locations: (0..n).map(|i| (i, 0)).collect(),
        }
    }

    fn classifier(d: usize, k: usize, w: Vec<f32>, n: u32) -> SparseClassifier {
        SparseClassifier::new(Array::new(vec![d, k], w).unwrap(), n, (0..k).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn eligibility_filter_and_ordering() {
        let c = classifier(5, 1, vec![0.5, 0.0, 0.2, 0.0005, 0.9], 2);
        let p = presence(vec![0.3, 0.99, 0.3, 0.8, 0.1]);
        let top = top_prototypes(&p, &c, 5, DEFAULT_ELIGIBILITY).unwrap();
        assert_eq!(top.iter().map(|t| t.id).collect::<Vec<_>>(), vec![0, 2, 4]);
        let one = top_prototypes(&p, &c, 1, DEFAULT_ELIGIBILITY).unwrap();
        assert_eq!(one[0].id, 0);
        assert_eq!(one[0].weights, vec![0.5]);
        assert!(top_prototypes(&p, &c, 0, DEFAULT_ELIGIBILITY).is_err());
    }

    #[test]
    fn sheet_examples() {
        let c = classifier(3, 2, vec![0.5, 0.1, 0.0, 0.3, 0.7, 0.0], 2);
        let zero = sheet_from_presence(&presence(vec![0.0; 3]), &c).unwrap();
        assert!(zero.classes.iter().all(|k| k.evidence == 0.0 && k.score == 0.0));

        let single = sheet_from_presence(&presence(vec![1.0, 0.0, 0.0]), &c).unwrap();
        assert_eq!(single.classes[0].evidence, 0.5);
        assert!((single.classes[0].score - (0.25f64 + 1.0).ln()).abs() < 1e-15);
        assert_eq!(single.prediction, "c0");

        let json = serde_json::to_value(&single).unwrap();
        assert!(json["prediction"].is_string());
        assert_eq!(json["classes"][0]["name"], "c0");
        assert!(json["prototypes"][0]["contributions"]["c1"].is_number());
        assert_eq!(json["prototypes"][1]["location"], serde_json::json!([1, 0]));
    }

    #[test]
    fn sheets_decompose_exactly_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (d, k) = (rng.random_range(1..40), rng.random_range(1..5));
            let n = rng.random_range(2..5);
            let w: Vec<f32> = (0..d * k)
                .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..3.0) })
                .collect();
            let c = classifier(d, k, w, n);
            let p = presence((0..d).map(|_| rng.random_range(0.0..=1.0)).collect());
            let s = sheet_from_presence(&p, &c).unwrap();
            let direct = c.evidence(&p.p).unwrap();
            for (j, entry) in s.classes.iter().enumerate() {
                let resum: f64 = s.prototypes.iter().map(|pr| pr.contributions[&entry.name]).sum();
                assert!((resum - entry.evidence).abs() <= 1e-5);
                assert!((direct[j] - entry.evidence).abs() <= 1e-5);
                assert!((entry.score - (entry.evidence.powi(n as i32) + 1.0).ln()).abs() <= 1e-6);
            }
            assert_eq!(s.classes[s.predicted_index()].name, s.prediction);
        }
    }

    #[test]
    fn heatmap_contracts() {
        let img = Image::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let zero = ActivationMap::new(0, 2, 2, vec![0.0; 4]).unwrap();
        let rgb = heatmap_rgb(&img, &zero).unwrap();
        for (i, &g) in img.pixels().iter().enumerate() {
            assert_eq!(&rgb[i * 3..i * 3 + 3], &[g, g, g]);
        }
        let one = ActivationMap::new(0, 2, 2, vec![1.0; 4]).unwrap();
        let flat = Image::filled(2, 2, 0.5);
        let rgb = heatmap_rgb(&flat, &one).unwrap();
        assert!(rgb.chunks(3).all(|px| px == &rgb[..3]));
        assert!((rgb[0] - (0.4 * 0.5 + 0.6)).abs() < 1e-6);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_heatmap(&img, &one, &a).unwrap();
        render_heatmap(&img, &one, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let wrong = ActivationMap::new(0, 3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(render_heatmap(&img, &wrong, &a), Err(Error::Shape(_))));
        let unwritable = dir.path().join("missing").join("x.png");
        assert!(matches!(render_heatmap(&img, &one, &unwritable), Err(Error::Io { .. })));
    }

    #[test]
    fn grid_points_land_on_corner_aligned_pixels() {
        assert_eq!(grid_to_pixel((0, 0), (8, 8), (64, 64)), (0, 0));
        assert_eq!(grid_to_pixel((7, 7), (8, 8), (64, 64)), (63, 63));
        assert_eq!(grid_to_pixel((1, 2), (8, 8), (64, 64)), (9, 18));
    }
}
