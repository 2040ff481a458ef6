//! One mini-batch: per-view encoder passes, a shared loss head, and the
//! per-view backward passes, reduced in a fixed order.

use std::collections::BTreeMap;

use crate::classifier::{score_term, CLASSIFIER_W};
use crate::encoder::{EncoderGraph, TOKENS};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_term, classification_term, koleo_term, l2_normalize_rows, onehot, tanh_term, LossBreakdown,
    LossWeights,
};
use crate::model::Model;
use crate::numerics::{Array, Bindings, Evaluation, Graph, NodeId};
use crate::par::{self, Exec};

/// The two patch-token arrays of one training image.
pub(crate) type TokenPair = (Array, Array);

pub(crate) struct BatchResult {
    pub breakdown: LossBreakdown,
    /// Encoder parameter gradients, plus the classifier weight when classifying.
    pub grads: Option<BTreeMap<String, Array>>,
}

struct Head {
    graph: Graph<f32>,
    alignment: NodeId,
    tanh: NodeId,
    koleo: NodeId,
    classification: Option<NodeId>,
    total: NodeId,
}

fn view_name(view: usize, i: usize) -> String {
    format!("f{view}.{i}")
}

fn build_head(
    b: usize,
    t: usize,
    d: usize,
    labels: Option<(&[usize], usize, u32)>,
    w: &LossWeights,
    lambda_align: f64,
) -> Result<Head> {
    let mut g = Graph::new();
    let mut stacked = Vec::new();
    let mut flat = Vec::new();
    for view in 1..=2 {
        let mut cube = Vec::with_capacity(b);
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let f = g.input(&view_name(view, i));
            cube.push(g.reshape(f, vec![1, t, d]));
            rows.push(g.reshape(f, vec![1, t * d]));
        }
        let cube = g.concat(cube, 0);
        stacked.push(g.softmax(cube, 2));
        flat.push(g.concat(rows, 0));
    }
    let (z1, z2) = (stacked[0], stacked[1]);
    let alignment = alignment_term(&mut g, z1, z2, 3, w.eps);
    g.label(alignment, "loss.alignment");

    let p1 = g.max(z1, 1);
    let p2 = g.max(z2, 1);
    let t1 = tanh_term(&mut g, p1, w.eps);
    let t2 = tanh_term(&mut g, p2, w.eps);
    let tanh = g.add(t1, t2);
    let tanh = g.scale(tanh, 0.5);
    g.label(tanh, "loss.tanh");

    let mut k = Vec::new();
    for &x in &flat {
        let unit = l2_normalize_rows(&mut g, x, b);
        k.push(koleo_term(&mut g, unit, b, w.eps));
    }
    let koleo = g.add(k[0], k[1]);
    let koleo = g.scale(koleo, 0.5);
    g.label(koleo, "loss.koleo");

    let a = g.scale(alignment, lambda_align);
    let tt = g.scale(tanh, w.lambda_tanh);
    let kk = g.scale(koleo, w.lambda_koleo);
    let mut total = g.add(a, tt);
    total = g.add(total, kk);

    let classification = match labels {
        None => None,
        Some((labels, classes, reg_order)) => {
            let p = g.concat(vec![p1, p2], 0);
            let wc = g.input(CLASSIFIER_W);
            let s = score_term(&mut g, p, wc, reg_order);
            let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
            let oh = g.constant(onehot(&both, classes)?);
            let c = classification_term(&mut g, s, oh, 2 * b);
            g.label(c, "loss.classification");
            let cc = g.scale(c, w.lambda_class);
            total = g.add(total, cc);
            Some(c)
        }
    };
    g.label(total, "loss.total");
    Ok(Head {
        graph: g,
        alignment,
        tanh,
        koleo,
        classification,
        total,
    })
}

fn add_into(acc: &mut BTreeMap<String, Array>, grads: BTreeMap<String, Array>) {
    for (name, g) in grads {
        if name == TOKENS {
            continue;
        }
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Evaluates the batch objective and, when `with_grads`, its gradients.
///
/// `labels` switches on the classification term (fine-tuning).
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_batch(
    model: &Model,
    eg: &EncoderGraph<f32>,
    views: &[TokenPair],
    labels: Option<&[usize]>,
    weights: &LossWeights,
    lambda_align: f64,
    with_grads: bool,
    exec: Exec,
) -> Result<BatchResult> {
    let b = views.len();
    if b < 2 {
        return Err(Error::Precondition(format!("a batch needs at least 2 images, got {b}")));
    }
    let enc = &model.encoder;
    let flat: Vec<&Array> = views.iter().flat_map(|(a, c)| [a, c]).collect();
    let evals: Vec<Evaluation<f32>> = par::map(exec, &flat, |tokens| eg.graph.forward(&enc.bindings(tokens)))
        .into_iter()
        .collect::<Result<_>>()?;
    let features: Vec<&Array> = evals.iter().map(|e| e.value(eg.output)).collect();
    let (t, d) = (features[0].shape()[0], features[0].shape()[1]);

    let cls = labels.map(|l| (l, model.classifier.classes(), model.classifier.reg_order));
    let head = build_head(b, t, d, cls, weights, lambda_align)?;
    let names: Vec<String> = (0..b).flat_map(|i| [view_name(1, i), view_name(2, i)]).collect();
    let mut bind = Bindings::new();
    for (name, f) in names.iter().zip(&features) {
        bind.insert(name, f);
    }
    if labels.is_some() {
        bind.insert(CLASSIFIER_W, &model.classifier.weights);
    }
    let head_eval = head.graph.forward(&bind)?;
    let item = |n: NodeId| head_eval.value(n).data()[0] as f64;
    let breakdown = LossBreakdown {
        alignment: item(head.alignment),
        tanh: item(head.tanh),
        koleo: item(head.koleo),
        classification: head.classification.map_or(0.0, item),
        total: item(head.total),
        lambda_align,
    };
    if !with_grads {
        return Ok(BatchResult { breakdown, grads: None });
    }

    let mut head_grads = head.graph.backward(&head_eval, head.total, Array::scalar(1.0))?;
    let seeds: Vec<(usize, Array)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (i, head_grads.remove(n).expect("every view feeds the loss")))
        .collect();
    let per_view = par::map(exec, &seeds, |(i, seed)| eg.graph.backward(&evals[*i], eg.output, seed.clone()));
    let mut acc = BTreeMap::new();
    for g in per_view {
        add_into(&mut acc, g?);
    }
    if labels.is_some() {
        let wg = head_grads.remove(CLASSIFIER_W).expect("classifier weight gradient");
        acc.insert(CLASSIFIER_W.to_string(), wg);
    }
    Ok(BatchResult {
        breakdown,
        grads: Some(acc),
    })
}
