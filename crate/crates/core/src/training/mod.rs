//! Multi-resolution self-supervised pre-training, supervised fine-tuning and
//! checkpoint persistence.

mod checkpoint;
mod optim;
mod step;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use optim::{clip_global_norm, global_norm, AdamW, CosineSchedule, ParamGroup};

use crate::classifier::{clamp_nonnegative, SparseClassifier, CLASSIFIER_W};
use crate::data::{two_view_augment, AugmentConfig, Dataset, Sample, Split};
use crate::encoder::{patchify, Encoder, EncoderConfig, EncoderGraph, POS_EMBED};
use crate::error::{Error, Result};
use crate::evaluation::balanced_accuracy;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::Model;
use crate::numerics::Array;
use crate::par::Exec;
use crate::raster::Image;
use step::{run_batch, TokenPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    /// Exponent `n` of the score transform `log(e^n + 1)`.
    pub reg_order: u32,
    /// Pre-training ladder, visited in order; each must appear in `encoder.resolutions`.
    pub resolutions: Vec<usize>,
    pub epochs_per_resolution: usize,
    pub finetune_epochs: usize,
    /// Defaults to the largest pre-training resolution.
    pub finetune_resolution: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of each phase's steps spent in linear learning-rate warm-up.
    pub lr_warmup_fraction: f64,
    pub weight_decay: f64,
    /// Classifier learning rate relative to `learning_rate`.
    pub classifier_lr_scale: f64,
    /// Uniform range for the initial classifier weights.
    pub classifier_init: [f32; 2],
    pub grad_clip: f64,
    /// Share of training images held fixed for pre-training checkpoint selection.
    pub eval_fraction: f64,
    pub seed: u64,
    pub checkpoint_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            reg_order: 2,
            resolutions: vec![32, 48, 64],
            epochs_per_resolution: 5,
            finetune_epochs: 30,
            finetune_resolution: None,
            batch_size: 16,
            learning_rate: 3e-4,
            lr_warmup_fraction: 0.1,
            weight_decay: 1e-4,
            classifier_lr_scale: 100.0,
            classifier_init: [0.0, 0.5],
            grad_clip: 1.0,
            eval_fraction: 0.1,
            seed: 0,
            checkpoint_dir: "checkpoints".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.resolutions.is_empty() {
            return bad("resolutions must not be empty".into());
        }
        for &r in self.resolutions.iter().chain(&self.finetune_resolution) {
            self.encoder.check_resolution(r)?;
            if !self.encoder.resolutions.contains(&r) {
                return bad(format!("resolution {r} is not listed in encoder.resolutions"));
            }
        }
        if self.epochs_per_resolution < 1 {
            return bad("epochs_per_resolution must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.reg_order < 2 {
            return bad(format!("reg_order must be >= 2, got {}", self.reg_order));
        }
        let [lo, hi] = self.classifier_init;
        if !(lo >= 0.0 && lo <= hi) {
            return bad("classifier_init must be a non-negative range".into());
        }
        let rates = [self.learning_rate, self.weight_decay, self.classifier_lr_scale, self.grad_clip];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning_rate, weight_decay, classifier_lr_scale and grad_clip must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.lr_warmup_fraction) || !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad("lr_warmup_fraction must lie in [0, 1] and eval_fraction in (0, 1]".into());
        }
        Ok(())
    }

    pub fn finetune_resolution(&self) -> usize {
        self.finetune_resolution
            .unwrap_or_else(|| *self.resolutions.iter().max().expect("validated non-empty"))
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    /// 1-based, counted within the phase.
    pub epoch: usize,
    pub resolution: usize,
    #[serde(rename = "L_A")]
    pub alignment: f64,
    #[serde(rename = "L_T")]
    pub tanh: f64,
    #[serde(rename = "L_KoLeo")]
    pub koleo: f64,
    #[serde(rename = "L_C")]
    pub classification: f64,
    pub total: f64,
    #[serde(rename = "lambda_A")]
    pub lambda_align: f64,
    pub lr: f64,
    /// Pre-training only: objective on the fixed selection subset at full alignment weight.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection_loss: Option<f64>,
    #[serde(rename = "val_BAcc", skip_serializing_if = "Option::is_none", default)]
    pub val_bacc: Option<f64>,
    pub min_classifier_weight: f32,
}

pub fn write_log(records: &[EpochRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Pre-training: selection loss of the untrained model. Fine-tuning: validation BAcc of `start`.
    pub initial_metric: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a (purpose, a, b) triple under the run seed.
fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ purpose.wrapping_mul(0xA24B_AED4_963E_E407)) ^ a) ^ b.rotate_left(17))
}

const SHUFFLE: u64 = 1;
const VIEWS: u64 = 2;
const SELECTION: u64 = 3;
const SELECTION_VIEWS: u64 = 4;
const INIT: u64 = 5;

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn steps_per_epoch(n: usize, size: usize) -> usize {
    batches(&(0..n).collect::<Vec<_>>(), size).len()
}

fn token_pair(image: &Image, seed: u64, cfg: &AugmentConfig, p: usize) -> Result<TokenPair> {
    let v = two_view_augment(image, seed, cfg);
    Ok((patchify(&v.view1, p)?, patchify(&v.view2, p)?))
}

fn resized(samples: &[&Sample], r: usize) -> Vec<Image> {
    samples.iter().map(|s| s.image.resize(r, r)).collect()
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    opt: AdamW,
    schedule: CosineSchedule,
    step: usize,
    exec: Exec,
}

impl Trainer<'_> {
    fn apply(&mut self, model: &mut Model, mut grads: BTreeMap<String, Array>) -> f64 {
        let lr = self.schedule.at(self.step);
        self.step += 1;
        clip_global_norm(grads.values_mut(), self.config.grad_clip);
        self.opt.begin_step();
        let decay = self.config.weight_decay;
        for (name, g) in &grads {
            if name == CLASSIFIER_W {
                let group = ParamGroup {
                    lr_scale: self.config.classifier_lr_scale,
                    weight_decay: 0.0,
                };
                self.opt.update(name, &mut model.classifier.weights, g, lr, group);
                clamp_nonnegative(&mut model.classifier.weights);
            } else {
                let p = model.encoder.params.get_mut(name).expect("gradient for a known parameter");
                let group = ParamGroup {
                    lr_scale: 1.0,
                    weight_decay: if p.ndim() >= 2 { decay } else { 0.0 },
                };
                self.opt.update(name, p, g, lr, group);
            }
        }
        lr
    }
}

#[derive(Default)]
struct Running {
    n: usize,
    sum: LossBreakdown,
}

impl Running {
    fn push(&mut self, b: &LossBreakdown) {
        self.n += 1;
        self.sum.alignment += b.alignment;
        self.sum.tanh += b.tanh;
        self.sum.koleo += b.koleo;
        self.sum.classification += b.classification;
        self.sum.total += b.total;
        self.sum.lambda_align = b.lambda_align;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            alignment: self.sum.alignment / n,
            tanh: self.sum.tanh / n,
            koleo: self.sum.koleo / n,
            classification: self.sum.classification / n,
            total: self.sum.total / n,
            lambda_align: self.sum.lambda_align,
        }
    }
}

fn check_finite(b: &LossBreakdown, phase: &str, epoch: usize) -> Result<()> {
    if [b.alignment, b.tanh, b.koleo, b.classification, b.total].iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Numeric {
        node: "loss.total".into(),
        detail: format!(
            "{phase} epoch {epoch}: L_A={} L_T={} L_KoLeo={} L_C={} total={}",
            b.alignment, b.tanh, b.koleo, b.classification, b.total
        ),
    })
}

fn record(phase: &str, epoch: usize, resolution: usize, b: &LossBreakdown, lr: f64, model: &Model) -> EpochRecord {
    EpochRecord {
        phase: phase.into(),
        epoch,
        resolution,
        alignment: b.alignment,
        tanh: b.tanh,
        koleo: b.koleo,
        classification: b.classification,
        total: b.total,
        lambda_align: b.lambda_align,
        lr,
        selection_loss: None,
        val_bacc: None,
        min_classifier_weight: model.classifier.weights.data().iter().copied().fold(f32::INFINITY, f32::min),
    }
}

/// A fresh model for `config`: encoder with its positional table on the grid of
/// the first ladder resolution, classifier with small positive weights.
pub fn init_model(config: &TrainConfig, class_names: Vec<String>) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT, 0, 0));
    let encoder = Encoder::init(config.encoder.clone(), config.resolutions[0], &mut rng)?;
    let classifier = SparseClassifier::init(
        config.encoder.embed_dim,
        class_names,
        config.reg_order,
        (config.classifier_init[0], config.classifier_init[1]),
        &mut rng,
    )?;
    Model::new(encoder, classifier, config.finetune_resolution())
}

fn train_split(dataset: &Dataset) -> Result<Vec<&Sample>> {
    let train = dataset.split(Split::Train);
    if train.len() < 2 {
        return Err(Error::data(&dataset.root, None, format!("need at least 2 training images, found {}", train.len())));
    }
    Ok(train)
}

/// Self-supervised pre-training over the resolution ladder; labels are ignored.
///
/// The returned checkpoint is the end-of-epoch state with the lowest
/// objective on a fixed, seeded subset of the training images.
pub fn pretrain(config: &TrainConfig, dataset: &Dataset, exec: Exec) -> Result<TrainOutcome> {
    let mut model = init_model(config, dataset.class_names.clone())?;
    let train = train_split(dataset)?;
    let n = train.len();
    let p = config.encoder.patch_size;

    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SELECTION, 0, 0)));
    let subset_len = ((n as f64 * config.eval_fraction).round() as usize).clamp(2, n);
    let mut subset = pool[..subset_len].to_vec();
    subset.sort_unstable();

    let per_epoch = steps_per_epoch(n, config.batch_size);
    let total_epochs = config.resolutions.len() * config.epochs_per_resolution;
    let total_steps = per_epoch * total_epochs;
    let mut trainer = Trainer {
        config,
        opt: AdamW::default(),
        schedule: CosineSchedule::new(config.learning_rate, total_steps, config.lr_warmup_fraction),
        step: 0,
        exec,
    };

    let selection = |model: &Model, images: &[Image]| -> Result<f64> {
        let eg = EncoderGraph::build(&model.encoder.config, model.encoder.pos_grid, model.encoder.pos_grid);
        let views: Vec<TokenPair> = subset
            .iter()
            .map(|&i| token_pair(&images[i], derive_seed(config.seed, SELECTION_VIEWS, i as u64, 0), &config.augment, p))
            .collect::<Result<_>>()?;
        let r = run_batch(model, &eg, &views, None, &config.loss, config.loss.lambda_align, false, exec)?;
        Ok(r.breakdown.total)
    };

    let first = config.resolutions[0];
    let initial_metric = selection(&model, &resized(&train, first))?;
    let mut best: Option<(f64, Model, usize)> = None;
    let mut log = Vec::with_capacity(total_epochs);
    let mut epoch = 0;
    for &res in &config.resolutions {
        model.encoder.set_positional_grid(config.encoder.grid(res))?;
        trainer.opt.reset(POS_EMBED);
        let images = resized(&train, res);
        let eg = model.encoder.graph(model.encoder.pos_grid);
        for _ in 0..config.epochs_per_resolution {
            epoch += 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE, epoch as u64, 0)));
            let mut running = Running::default();
            let mut lr = 0.0;
            for batch in batches(&order, config.batch_size) {
                let progress = trainer.step as f64 / total_steps.max(1) as f64;
                let lambda_align = config.loss.alignment_weight_at(progress);
                let views: Vec<TokenPair> = batch
                    .iter()
                    .map(|&i| token_pair(&images[i], derive_seed(config.seed, VIEWS, epoch as u64, i as u64), &config.augment, p))
                    .collect::<Result<_>>()?;
                let r = run_batch(&model, &eg, &views, None, &config.loss, lambda_align, true, trainer.exec)?;
                check_finite(&r.breakdown, "pretrain", epoch)?;
                running.push(&r.breakdown);
                lr = trainer.apply(&mut model, r.grads.expect("gradients requested"));
            }
            let mean = running.mean();
            let sel = selection(&model, &images)?;
            let mut rec = record("pretrain", epoch, res, &mean, lr, &model);
            rec.selection_loss = Some(sel);
            log::info!(
                "pretrain epoch {epoch} res {res}: total {:.4} (A {:.4} T {:.4} K {:.4}) selection {sel:.4}",
                mean.total,
                mean.alignment,
                mean.tanh,
                mean.koleo
            );
            log.push(rec);
            if best.as_ref().is_none_or(|(b, _, _)| sel < *b) {
                best = Some((sel, model.clone(), epoch));
            }
        }
    }
    let (sel, best_model, best_epoch) = best.expect("at least one epoch");
    let mut metrics = BTreeMap::new();
    metrics.insert("selection_loss".to_string(), sel);
    metrics.insert("initial_selection_loss".to_string(), initial_metric);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: best_model,
            config: config.clone(),
            epoch: best_epoch,
            metrics,
        },
        log,
        initial_metric,
    })
}

/// Balanced accuracy of `model` on `samples` at the model's resolution.
pub fn evaluate_bacc(model: &Model, samples: &[&Sample], exec: Exec) -> Result<f64> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds: Vec<usize> = model.infer_all(&images, exec)?.iter().map(|i| i.predicted()).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(balanced_accuracy(&truth, &preds, model.classifier.classes()))
}

/// End-to-end fine-tuning with the classification term at the fine-tuning
/// resolution. Returns the epoch with the best validation balanced accuracy
/// (later epochs win ties); with zero epochs `start` comes back unchanged.
pub fn finetune(config: &TrainConfig, dataset: &Dataset, start: &Checkpoint, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.num_classes() != start.model.classifier.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier has {}",
            dataset.num_classes(),
            start.model.classifier.classes()
        )));
    }
    if start.model.encoder.config != config.encoder {
        return Err(Error::Config("checkpoint encoder does not match the configured encoder".into()));
    }
    if config.finetune_epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: start.clone(),
            log: Vec::new(),
            initial_metric: f64::NAN,
        });
    }
    let train = train_split(dataset)?;
    let val = dataset.split(Split::Val);
    if val.is_empty() {
        return Err(Error::data(&dataset.root, None, "fine-tuning needs validation images"));
    }
    let res = config.finetune_resolution();
    let mut model = start.model.at_resolution(res)?;
    model.classifier.reg_order = config.reg_order;
    let p = config.encoder.patch_size;
    let n = train.len();
    let images = resized(&train, res);
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let eg = model.encoder.graph(model.encoder.pos_grid);

    let per_epoch = steps_per_epoch(n, config.batch_size);
    let total_steps = per_epoch * config.finetune_epochs;
    let mut trainer = Trainer {
        config,
        opt: AdamW::default(),
        schedule: CosineSchedule::new(config.learning_rate, total_steps, config.lr_warmup_fraction),
        step: 0,
        exec,
    };
    let phase_seed = config.seed ^ 0xF1;
    let initial_metric = evaluate_bacc(&model, &val, exec)?;
    let mut best: Option<(f64, Model, usize)> = None;
    let mut log = Vec::with_capacity(config.finetune_epochs);
    for epoch in 1..=config.finetune_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(phase_seed, SHUFFLE, epoch as u64, 0)));
        let mut running = Running::default();
        let mut lr = 0.0;
        for batch in batches(&order, config.batch_size) {
            let views: Vec<TokenPair> = batch
                .iter()
                .map(|&i| token_pair(&images[i], derive_seed(phase_seed, VIEWS, epoch as u64, i as u64), &config.augment, p))
                .collect::<Result<_>>()?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let r = run_batch(&model, &eg, &views, Some(&y), &config.loss, config.loss.lambda_align, true, trainer.exec)?;
            check_finite(&r.breakdown, "finetune", epoch)?;
            running.push(&r.breakdown);
            lr = trainer.apply(&mut model, r.grads.expect("gradients requested"));
        }
        let mean = running.mean();
        let bacc = evaluate_bacc(&model, &val, exec)?;
        let mut rec = record("finetune", epoch, res, &mean, lr, &model);
        rec.val_bacc = Some(bacc);
        log::info!(
            "finetune epoch {epoch}: total {:.4} (C {:.4}) val BAcc {bacc:.3}",
            mean.total,
            mean.classification
        );
        log.push(rec);
        if best.as_ref().is_none_or(|(b, _, _)| bacc >= *b) {
            best = Some((bacc, model.clone(), epoch));
        }
    }
    let (bacc, best_model, best_epoch) = best.expect("at least one epoch");
    let mut metrics = BTreeMap::new();
    metrics.insert("val_bacc".to_string(), bacc);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: best_model,
            config: config.clone(),
            epoch: best_epoch,
            metrics,
        },
        log,
        initial_metric,
    })
}

/// Writes `records` as JSON lines to `path`.
pub fn save_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log(records, &mut buf).expect("in-memory write");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
