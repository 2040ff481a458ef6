//! Training objectives: view alignment, tanh presence, KoLeo spreading and
//! classification NLL, plus their weighted combinations.
//!
//! Every loss is written once as a graph fragment (`*_term`) so the same code
//! serves training and the standalone evaluators below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Bindings, Element, Graph, NodeId};
use crate::prototype_head::ProtoGrid;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_tanh: f64,
    pub lambda_koleo: f64,
    pub lambda_class: f64,
    pub eps: f64,
    /// Fraction of pre-training over which the alignment weight ramps up from 0.
    pub warmup_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_align: 1.0,
            lambda_tanh: 1.0,
            lambda_koleo: 1.0,
            lambda_class: 1.0,
            eps: DEFAULT_EPS,
            warmup_fraction: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_align, self.lambda_tanh, self.lambda_koleo, self.lambda_class];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Alignment weight at pre-training progress `step` in `[0, 1]`.
    pub fn alignment_weight_at(&self, step: f64) -> f64 {
        if self.warmup_fraction <= 0.0 {
            return self.lambda_align;
        }
        self.lambda_align * (step / self.warmup_fraction).clamp(0.0, 1.0)
    }
}

/// `B x D` presence scores.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPresence(Array);

impl BatchPresence {
    pub fn new(values: Array) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape(format!("batch presence must be B x D, got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition("presence scores must lie in [0, 1]".into()));
        }
        Ok(BatchPresence(values))
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("presence rows differ in length"));
        }
        Self::new(Array::new(vec![rows.len(), d], rows.concat())?)
    }

    pub fn values(&self) -> &Array {
        &self.0
    }
}

// Graph fragments.

/// `-mean log(z1 . z2 + eps)` over every location; inputs are `[.., T, D]` with matching shapes.
pub fn alignment_term<T: Element>(g: &mut Graph<T>, z1: NodeId, z2: NodeId, rank: usize, eps: f64) -> NodeId {
    let prod = g.mul(z1, z2);
    let dot = g.sum(prod, rank - 1);
    let dot = g.add_scalar(dot, eps);
    let l = g.log(dot);
    g.label(l, "alignment.log");
    let m = g.mean_all(l, rank - 1);
    g.neg(m)
}

/// `-(1/D) sum_d log(tanh(sum_b P[b, d]) + eps)` for `P` of shape `[B, D]`.
pub fn tanh_term<T: Element>(g: &mut Graph<T>, presence: NodeId, eps: f64) -> NodeId {
    let s = g.sum(presence, 0);
    let t = g.tanh(s);
    let t = g.add_scalar(t, eps);
    let l = g.log(t);
    g.label(l, "tanh.log");
    let m = g.mean(l, 0);
    g.neg(m)
}

/// Rows of `x` (`[n, F]`) scaled to unit length.
pub fn l2_normalize_rows<T: Element>(g: &mut Graph<T>, x: NodeId, n: usize) -> NodeId {
    let norm = g.l2_norm(x);
    let norm = g.reshape(norm, vec![n, 1]);
    let inv = g.power(norm, -1.0);
    g.label(inv, "koleo.inverse_norm");
    g.mul(x, inv)
}

/// `-(1/n) sum_i log(min_{j != i} |x_i - x_j| + eps)` for `x` of shape `[n, F]`.
pub fn koleo_term<T: Element>(g: &mut Graph<T>, x: NodeId, n: usize, eps: f64) -> NodeId {
    // One row per ordered pair (i, j != i): x_i - x_j.
    let mut pairs = vec![0.0f64; n * (n - 1) * n];
    let mut row = 0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            pairs[row * n + i] = 1.0;
            pairs[row * n + j] = -1.0;
            row += 1;
        }
    }
    let pairs = g.constant(Array::from_f64(vec![n * (n - 1), n], &pairs).expect("pair operator"));
    let diffs = g.matmul(pairs, x);
    let dist = g.l2_norm(diffs);
    let dist = g.reshape(dist, vec![n, n - 1]);
    let nearest = g.min(dist, 1);
    let nearest = g.add_scalar(nearest, eps);
    let l = g.log(nearest);
    g.label(l, "koleo.log");
    let m = g.mean(l, 0);
    g.neg(m)
}

/// Mean negative log-softmax of the true class; `onehot` is a `[N, K]` constant.
pub fn classification_term<T: Element>(g: &mut Graph<T>, scores: NodeId, onehot: NodeId, n: usize) -> NodeId {
    let m = g.max(scores, 1);
    let m = g.reshape(m, vec![n, 1]);
    let shifted = g.sub(scores, m);
    let e = g.exp(shifted);
    let z = g.sum(e, 1);
    let lz = g.log(z);
    let lz = g.reshape(lz, vec![n, 1]);
    let logp = g.sub(shifted, lz);
    let picked = g.mul(logp, onehot);
    let per = g.sum(picked, 1);
    let m = g.mean(per, 0);
    g.neg(m)
}

pub fn onehot<T: Element>(labels: &[usize], classes: usize) -> Result<Array<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::data(
                "<labels>",
                None,
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        data[i * classes + l] = T::one();
    }
    Array::new(vec![labels.len(), classes], data)
}

fn eval_scalar(g: &Graph<f64>, bindings: &Bindings<'_, f64>, out: NodeId) -> Result<f64> {
    g.forward(bindings)?.value(out).item()
}

// Standalone evaluators.

pub fn alignment_loss(z1: &ProtoGrid, z2: &ProtoGrid, eps: f64) -> Result<f64> {
    if z1.values.shape() != z2.values.shape() {
        return Err(Error::shape(format!(
            "alignment views differ: {:?} vs {:?}",
            z1.values.shape(),
            z2.values.shape()
        )));
    }
    let (a, b) = (z1.values.cast::<f64>(), z2.values.cast::<f64>());
    let mut g = Graph::new();
    let (x, y) = (g.input("a"), g.input("b"));
    let out = alignment_term(&mut g, x, y, 3, eps);
    eval_scalar(&g, &Bindings::new().bind("a", &a).bind("b", &b), out)
}

pub fn tanh_loss(p: &BatchPresence, eps: f64) -> Result<f64> {
    let v = p.values().cast::<f64>();
    let mut g = Graph::new();
    let x = g.input("p");
    let out = tanh_term(&mut g, x, eps);
    eval_scalar(&g, &Bindings::new().bind("p", &v), out)
}

pub fn koleo_loss(batch: &[Vec<f32>], eps: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Precondition(format!(
            "KoLeo needs at least 2 vectors, got {}",
            batch.len()
        )));
    }
    let f = batch[0].len();
    if batch.iter().any(|v| v.len() != f) {
        return Err(Error::shape("KoLeo vectors differ in length"));
    }
    let data: Vec<f64> = batch.iter().flatten().map(|&v| v as f64).collect();
    let x = Array::new(vec![batch.len(), f], data)?;
    let mut g = Graph::new();
    let xi = g.input("x");
    let out = koleo_term(&mut g, xi, batch.len(), eps);
    eval_scalar(&g, &Bindings::new().bind("x", &x), out)
}

/// `scores` is `[N, K]`; `labels[i] < K`.
pub fn classification_loss(scores: &Array, labels: &[usize]) -> Result<f64> {
    if scores.ndim() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "scores {:?} do not match {} labels",
            scores.shape(),
            labels.len()
        )));
    }
    let k = scores.shape()[1];
    let oh = onehot::<f64>(labels, k)?;
    let s = scores.cast::<f64>();
    let mut g = Graph::new();
    let si = g.input("s");
    let o = g.constant(oh);
    let out = classification_term(&mut g, si, o, labels.len());
    eval_scalar(&g, &Bindings::new().bind("s", &s), out)
}

/// Unweighted component values and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alignment: f64,
    pub tanh: f64,
    pub koleo: f64,
    pub classification: f64,
    pub total: f64,
    /// Alignment weight actually applied (after warm-up).
    pub lambda_align: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub alignment: f64,
    pub tanh: f64,
    pub koleo: f64,
    pub classification: f64,
}

impl Components {
    fn combine(self, lambda_align: f64, w: &LossWeights, with_class: bool) -> LossBreakdown {
        let class_term = if with_class { w.lambda_class * self.classification } else { 0.0 };
        LossBreakdown {
            alignment: self.alignment,
            tanh: self.tanh,
            koleo: self.koleo,
            classification: self.classification,
            total: lambda_align * self.alignment + w.lambda_tanh * self.tanh + w.lambda_koleo * self.koleo + class_term,
            lambda_align,
        }
    }
}

/// Weighted pre-training objective; the alignment weight ramps up with `step`.
pub fn pretrain_objective(
    views1: &[ProtoGrid],
    views2: &[ProtoGrid],
    presence: &BatchPresence,
    batch_vectors: &[Vec<f32>],
    weights: &LossWeights,
    step: f64,
) -> Result<LossBreakdown> {
    if views1.len() != views2.len() || views1.is_empty() {
        return Err(Error::Precondition("need matching non-empty view batches".into()));
    }
    let mut align = 0.0;
    for (a, b) in views1.iter().zip(views2) {
        align += alignment_loss(a, b, weights.eps)?;
    }
    let c = Components {
        alignment: align / views1.len() as f64,
        tanh: tanh_loss(presence, weights.eps)?,
        koleo: koleo_loss(batch_vectors, weights.eps)?,
        classification: 0.0,
    };
    Ok(pretrain_combination(c, weights, step))
}

pub fn pretrain_combination(c: Components, weights: &LossWeights, step: f64) -> LossBreakdown {
    c.combine(weights.alignment_weight_at(step), weights, false)
}

/// Fine-tuning objective: all four terms at their target weights, no warm-up.
pub fn finetune_objective(c: Components, weights: &LossWeights) -> LossBreakdown {
    c.combine(weights.lambda_align, weights, true)
}

#[cfg(test)]
mod tests;
