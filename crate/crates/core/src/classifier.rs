//! Non-negative linear scoring layer over prototype presence.
//!
//! Class evidence is `e_k = sum_d p_d w_{d,k}` and the class score is
//! `log(e_k^n + 1)`; scores feed a softmax/NLL loss during training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Array, Element, Graph, NodeId};

pub const CLASSIFIER_W: &str = "classifier.weight";

#[derive(Debug, Clone, PartialEq)]
pub struct SparseClassifier {
    /// `[D, K]`, every entry >= 0.
    pub weights: Array,
    pub reg_order: u32,
    pub class_names: Vec<String>,
}

impl SparseClassifier {
    pub fn new(weights: Array, reg_order: u32, class_names: Vec<String>) -> Result<Self> {
        if weights.ndim() != 2 || weights.shape()[1] != class_names.len() {
            return Err(Error::shape(format!(
                "classifier weights {:?} do not match {} classes",
                weights.shape(),
                class_names.len()
            )));
        }
        if reg_order < 2 {
            return Err(Error::Config(format!("reg_order must be >= 2, got {reg_order}")));
        }
        Ok(project_nonnegative(SparseClassifier {
            weights,
            reg_order,
            class_names,
        }))
    }

    /// Weights drawn uniformly from `[lo, hi)`.
    pub fn init<R: Rng>(
        prototypes: usize,
        class_names: Vec<String>,
        reg_order: u32,
        (lo, hi): (f32, f32),
        rng: &mut R,
    ) -> Result<Self> {
        let k = class_names.len();
        let data = (0..prototypes * k).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(Array::new(vec![prototypes, k], data)?, reg_order, class_names)
    }

    pub fn prototypes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[1]
    }

    #[inline]
    pub fn weight(&self, d: usize, k: usize) -> f32 {
        self.weights.data()[d * self.classes() + k]
    }

    /// `e_k = sum_d p_d w_{d,k}`.
    pub fn evidence(&self, p: &[f32]) -> Result<Vec<f64>> {
        if p.len() != self.prototypes() {
            return Err(Error::shape(format!(
                "presence of length {} for {} prototypes",
                p.len(),
                self.prototypes()
            )));
        }
        let k = self.classes();
        let mut e = vec![0.0f64; k];
        for (d, &pd) in p.iter().enumerate() {
            for (c, ec) in e.iter_mut().enumerate() {
                *ec += pd as f64 * self.weight(d, c) as f64;
            }
        }
        Ok(e)
    }
}

/// The output transform `log(e^n + 1)`.
#[inline]
pub fn transform(evidence: f64, reg_order: u32) -> f64 {
    (evidence.powi(reg_order as i32)).ln_1p()
}

pub fn score(p: &[f32], c: &SparseClassifier) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("presence scores must lie in [0, 1]".into()));
    }
    Ok(c.evidence(p)?
        .into_iter()
        .map(|e| transform(e, c.reg_order))
        .collect())
}

pub fn project_nonnegative(mut c: SparseClassifier) -> SparseClassifier {
    clamp_nonnegative(&mut c.weights);
    c
}

pub(crate) fn clamp_nonnegative(w: &mut Array) {
    for v in w.data_mut() {
        *v = v.max(0.0);
    }
}

/// Prototypes with weight above `threshold` for class `k`, heaviest first, ties by id.
pub fn relevant_prototypes(c: &SparseClassifier, k: usize, threshold: f32) -> Result<Vec<(usize, f32)>> {
    if k >= c.classes() {
        return Err(Error::Index {
            what: "class",
            index: k,
            len: c.classes(),
        });
    }
    let mut out: Vec<(usize, f32)> = (0..c.prototypes())
        .map(|d| (d, c.weight(d, k)))
        .filter(|&(_, w)| w > threshold)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Graph fragment mapping presence `[N, D]` and weights `[D, K]` to scores `[N, K]`.
pub fn score_term<T: Element>(g: &mut Graph<T>, presence: NodeId, weights: NodeId, reg_order: u32) -> NodeId {
    let e = g.matmul(presence, weights);
    g.label(e, "classifier.evidence");
    let en = g.power(e, reg_order as f64);
    let en = g.add_scalar(en, 1.0);
    let s = g.log(en);
    g.label(s, "classifier.score")
}
