//! Whole-dataset evaluation runs that produce the serialized reports.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detection::{average_precision, pr_sweep, random_centroid_case, DetectionCase, PrPoint, AP_DEFINITION};
use super::metrics::{bootstrap_ci, classification_metrics, BootstrapInterval, ClassificationReport};
use crate::classifier::SparseClassifier;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{self, Exec};
use crate::prototype_head::{activation_map, ActivationMap};
use crate::raster::load_gray;

/// Prototype with the largest weight towards `class` (lowest id on ties).
pub fn top_weighted_prototype(c: &SparseClassifier, class: usize) -> Result<usize> {
    if class >= c.classes() {
        return Err(Error::Index {
            what: "class",
            index: class,
            len: c.classes(),
        });
    }
    let mut best = 0;
    for d in 1..c.prototypes() {
        if c.weight(d, class) > c.weight(best, class) {
            best = d;
        }
    }
    Ok(best)
}

/// Activation map of `prototype` at the image's own size.
pub fn model_activation(model: &Model, sample: &Sample, prototype: usize) -> Result<ActivationMap> {
    let inf = model.infer(&sample.image)?;
    activation_map(&inf.prototypes, prototype, (sample.image.width(), sample.image.height()))
}

/// Images evaluated for localization: those with at least one annotated box.
pub fn annotated<'a>(samples: &[&'a Sample]) -> Vec<&'a Sample> {
    samples.iter().copied().filter(|s| !s.boxes.is_empty()).collect()
}

pub fn cases_from_model(
    model: &Model,
    samples: &[&Sample],
    prototype: usize,
    tau: f64,
    exec: Exec,
) -> Result<Vec<DetectionCase>> {
    if prototype >= model.classifier.prototypes() {
        return Err(Error::Index {
            what: "prototype",
            index: prototype,
            len: model.classifier.prototypes(),
        });
    }
    par::map(exec, samples, |s| {
        DetectionCase::from_map(&model_activation(model, s, prototype)?, s.boxes.clone(), tau)
    })
    .into_iter()
    .collect()
}

/// Maps stored as 16-bit PNGs under `maps_dir`, one per sample at the sample's relative path.
pub fn cases_from_maps(
    samples: &[&Sample],
    maps_dir: &Path,
    tau: f64,
    exec: Exec,
) -> Result<Vec<DetectionCase>> {
    par::map(exec, samples, |s| {
        let path = maps_dir.join(&s.path);
        let img = load_gray(&path)?;
        if (img.width(), img.height()) != (s.image.width(), s.image.height()) {
            return Err(Error::data(&path, None, "activation map size differs from the image"));
        }
        let map = ActivationMap::new(0, img.width(), img.height(), img.pixels().to_vec())?;
        DetectionCase::from_map(&map, s.boxes.clone(), tau)
    })
    .into_iter()
    .collect()
}

/// Random-centroid counterparts of `cases`, one independent stream per case.
pub fn baseline_cases(cases: &[DetectionCase], seed: u64) -> Vec<DetectionCase> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xBA5E_0000 + i as u64));
            random_centroid_case(c, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<PrPoint>,
    #[serde(rename = "AP")]
    pub ap: f64,
}

pub fn sweep(cases: &[DetectionCase], scales: &[f64], min_overlap: f64, exec: Exec) -> Result<SweepResult> {
    let points = pr_sweep(cases, scales, min_overlap, exec)?;
    let ap = average_precision(&points)?;
    Ok(SweepResult { points, ap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tau: f64,
    pub scales: Vec<f64>,
    pub points: Vec<PrPoint>,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub ap_definition: String,
    pub baseline: SweepResult,
    pub images: usize,
    pub gt_boxes: usize,
    pub config: serde_json::Value,
}

pub fn detection_report(
    cases: &[DetectionCase],
    scales: &[f64],
    tau: f64,
    min_overlap: f64,
    seed: u64,
    config: serde_json::Value,
    exec: Exec,
) -> Result<DetectionReport> {
    let model = sweep(cases, scales, min_overlap, exec)?;
    let baseline = sweep(&baseline_cases(cases, seed), scales, min_overlap, exec)?;
    Ok(DetectionReport {
        tau,
        scales: scales.to_vec(),
        points: model.points,
        ap: model.ap,
        ap_definition: AP_DEFINITION.to_string(),
        baseline,
        images: cases.len(),
        gt_boxes: cases.iter().map(|c| c.gt.len()).sum(),
        config,
    })
}

pub fn points_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("scale,precision,recall,tp,fp,fn\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{},{}\n", p.scale, p.precision, p.recall, p.tp, p.fp, p.fn_));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetricCi {
    pub bacc: BootstrapInterval,
    pub f1_macro: BootstrapInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub metrics: ClassificationReport,
    pub bootstrap: Option<ClassMetricCi>,
}

pub fn classification_eval(
    model: &Model,
    samples: &[&Sample],
    replicates: usize,
    seed: u64,
    exec: Exec,
) -> Result<ClassificationEval> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let inf = model.infer_all(&images, exec)?;
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let y_pred: Vec<usize> = inf.iter().map(|i| i.predicted()).collect();
    let scores: Vec<Vec<f64>> = inf.into_iter().map(|i| i.probabilities).collect();
    let metrics = classification_metrics(&y_true, &y_pred, &scores)?;
    let k = model.classifier.classes();
    let bootstrap = if replicates == 0 {
        None
    } else {
        let resampled = |idx: &[usize]| -> Option<ClassificationReport> {
            let t: Vec<usize> = idx.iter().map(|&i| y_true[i]).collect();
            // a replicate missing a class has no per-class recall for it
            if (0..k).any(|c| y_true.contains(&c) && !t.contains(&c)) {
                return None;
            }
            let p: Vec<usize> = idx.iter().map(|&i| y_pred[i]).collect();
            let sc: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
            classification_metrics(&t, &p, &sc).ok()
        };
        Some(ClassMetricCi {
            bacc: bootstrap_ci(|idx| resampled(idx).map(|r| r.bacc), samples.len(), replicates, seed, 0.95)?,
            f1_macro: bootstrap_ci(|idx| resampled(idx).map(|r| r.f1_macro), samples.len(), replicates, seed, 0.95)?,
        })
    };
    Ok(ClassificationEval {
        class_names: model.class_names().to_vec(),
        samples: samples.len(),
        metrics,
        bootstrap,
    })
}
