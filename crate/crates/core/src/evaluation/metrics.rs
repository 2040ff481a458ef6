use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Mean recall over the classes that occur in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], classes: usize) -> f64 {
    let m = confusion(y_true, y_pred, classes);
    let recalls: Vec<f64> = m
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        return 0.0;
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// F1 averaged over classes occurring in `y_true` or `y_pred`.
fn macro_f1(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..k {
        let tp = m[c][c];
        let fn_: usize = m[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..k).map(|r| m[r][c]).sum::<usize>() - tp;
        if tp + fn_ + fp == 0 {
            continue;
        }
        used += 1;
        sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    if used == 0 {
        0.0
    } else {
        sum / used as f64
    }
}

/// Rank-sum AUC of `scores` separating `positive` from the rest; midranks on ties.
fn auc_one_vs_rest(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub bacc: f64,
    pub f1_macro: f64,
    /// Macro average over the classes for which AUC is defined; `None` when none is.
    pub auc_ovr: Option<f64>,
    /// Classes left out of the AUC average because they lack positives or negatives.
    pub auc_skipped_classes: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

/// `scores[i]` holds the class probabilities of sample `i`.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], scores: &[Vec<f64>]) -> Result<ClassificationReport> {
    if y_true.len() != y_pred.len() || y_true.len() != scores.len() || y_true.is_empty() {
        return Err(Error::Precondition(format!(
            "inconsistent lengths: {} labels, {} predictions, {} score rows",
            y_true.len(),
            y_pred.len(),
            scores.len()
        )));
    }
    let k = scores[0].len();
    for (i, row) in scores.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != k || (s - 1.0).abs() > 1e-4 {
            return Err(Error::Precondition(format!("score row {i} must have {k} entries summing to 1")));
        }
    }
    if let Some(bad) = y_true.iter().chain(y_pred).find(|&&c| c >= k) {
        return Err(Error::Precondition(format!("class {bad} out of range for {k} classes")));
    }
    let m = confusion(y_true, y_pred, k);
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        match auc_one_vs_rest(&col, &pos) {
            Some(a) => aucs.push(a),
            None => {
                log::warn!("AUC undefined for class {c}; left out of the macro average");
                skipped.push(c);
            }
        }
    }
    Ok(ClassificationReport {
        bacc: balanced_accuracy(y_true, y_pred, k),
        f1_macro: macro_f1(&m),
        auc_ovr: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        auc_skipped_classes: skipped,
        confusion: m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub low: f64,
    pub high: f64,
    /// Metric on the full data.
    pub point: f64,
    pub replicates: usize,
    pub level: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redraws: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` items. `metric` receives resampled indices and
/// returns `None` when undefined on them; such resamples are redrawn, giving up
/// after `10 * replicates` redraws.
pub fn bootstrap_ci<F>(metric: F, n: usize, replicates: usize, seed: u64, level: f64) -> Result<BootstrapInterval>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 || replicates == 0 {
        return Err(Error::Precondition("bootstrap needs data and at least one replicate".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("level must lie in (0, 1), got {level}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all).ok_or_else(|| Error::Precondition("metric undefined on the full data".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(replicates);
    let mut redraws = 0;
    let mut idx = vec![0; n];
    while values.len() < replicates {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        match metric(&idx) {
            Some(v) => values.push(v),
            None => {
                redraws += 1;
                if redraws > 10 * replicates {
                    return Err(Error::Numeric {
                        node: "bootstrap".into(),
                        detail: format!("metric undefined on {redraws} resamples; aborting"),
                    });
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapInterval {
        low: quantile(&values, tail),
        high: quantile(&values, 1.0 - tail),
        point,
        replicates,
        level,
        redraws,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn from_confusion(m: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
        let (mut t, mut p) = (Vec::new(), Vec::new());
        for (i, row) in m.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                t.extend(std::iter::repeat_n(i, n));
                p.extend(std::iter::repeat_n(j, n));
            }
        }
        (t, p)
    }

    fn onehot_scores(p: &[usize], k: usize) -> Vec<Vec<f64>> {
        p.iter().map(|&c| (0..k).map(|j| if j == c { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn three_class_example_is_exact() {
        let m = vec![vec![8, 2, 0], vec![1, 9, 0], vec![0, 3, 7]];
        let (t, p) = from_confusion(&m);
        let r = classification_metrics(&t, &p, &onehot_scores(&p, 3)).unwrap();
        assert_eq!(r.bacc, (0.8 + 0.9 + 0.7) / 3.0);
        assert!((r.bacc - 0.8).abs() < 1e-15);
        assert_eq!(r.confusion, m);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let t = vec![0, 1, 1, 0, 2];
        let r = classification_metrics(&t, &t, &onehot_scores(&t, 3)).unwrap();
        assert_eq!((r.bacc, r.f1_macro, r.auc_ovr), (1.0, 1.0, Some(1.0)));
        let t = vec![0, 0, 1, 1];
        let p = vec![1, 1, 1, 1];
        let r = classification_metrics(&t, &p, &vec![vec![0.5, 0.5]; 4]).unwrap();
        assert_eq!(r.bacc, 0.5);
        assert_eq!(r.auc_ovr, Some(0.5));
    }

    #[test]
    fn absent_class_is_skipped_for_auc() {
        let t = vec![0, 0, 1, 1];
        let r = classification_metrics(&t, &t, &onehot_scores(&t, 3)).unwrap();
        assert_eq!(r.auc_skipped_classes, vec![2]);
        assert_eq!(r.auc_ovr, Some(1.0));
    }

    #[test]
    fn midranks_handle_ties() {
        // Pairs (pos, neg): (0.5 vs 0.5) counts one half, (0.9 vs 0.5) counts one.
        assert_eq!(auc_one_vs_rest(&[0.5, 0.9, 0.5], &[true, true, false]), Some(0.75));
    }

    #[test]
    fn rows_must_be_distributions() {
        let err = classification_metrics(&[0, 1], &[0, 1], &[vec![0.5, 0.6], vec![0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn bootstrap_contracts() {
        let constant = bootstrap_ci(|_| Some(0.7), 30, 200, 1, 0.95).unwrap();
        assert_eq!((constant.low, constant.high, constant.point), (0.7, 0.7, 0.7));
        let mean = |idx: &[usize]| Some(idx.iter().map(|&i| i as f64).sum::<f64>() / idx.len() as f64);
        assert_eq!(bootstrap_ci(mean, 50, 300, 4, 0.95).unwrap(), bootstrap_ci(mean, 50, 300, 4, 0.95).unwrap());
        // Defined only on the identity resample, so every draw is redrawn.
        let identity_only = |idx: &[usize]| idx.iter().enumerate().all(|(i, &v)| i == v).then_some(1.0);
        let err = bootstrap_ci(identity_only, 8, 10, 0, 0.95).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn bootstrap_counts_redraws() {
        // Undefined whenever item 0 is missing from the resample.
        let metric = |idx: &[usize]| idx.contains(&0).then_some(1.0);
        let r = bootstrap_ci(metric, 5, 100, 3, 0.9).unwrap();
        assert!(r.redraws > 0);
        assert_eq!(r.replicates, 100);
    }

    #[test]
    fn coin_flip_interval_contains_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let p: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let metric = |idx: &[usize]| {
            let tt: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            (tt.contains(&0) && tt.contains(&1)).then(|| balanced_accuracy(&tt, &pp, 2))
        };
        let ci = bootstrap_ci(metric, 1000, 1000, 0, 0.95).unwrap();
        assert!(ci.low <= 0.5 && 0.5 <= ci.high, "{ci:?}");
        assert!(ci.high - ci.low < 0.1);
    }

    fn tally(t: &[usize], p: &[usize], k: usize) -> (f64, f64) {
        let mut rec = Vec::new();
        let mut f1 = Vec::new();
        for c in 0..k {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..t.len() {
                match (t[i] == c, p[i] == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fn_ > 0 {
                rec.push(tp as f64 / (tp + fn_) as f64);
            }
            if tp + fp + fn_ > 0 {
                f1.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
            }
        }
        (rec.iter().sum::<f64>() / rec.len() as f64, f1.iter().sum::<f64>() / f1.len() as f64)
    }

    proptest! {
        #[test]
        fn matches_a_brute_force_tally(
            k in 2usize..=4,
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..=20),
        ) {
            let t: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
            let r = classification_metrics(&t, &p, &onehot_scores(&p, k)).unwrap();
            let (bacc, f1) = tally(&t, &p, k);
            prop_assert!((r.bacc - bacc).abs() < 1e-12);
            prop_assert!((r.f1_macro - f1).abs() < 1e-12);
        }
    }
}
