use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{evaluate_with_gradients, finite_difference_gradient, gradient_mismatch, softmax};

const EPS: f64 = 1e-8;

fn proto(w: usize, h: usize, d: usize, data: Vec<f32>) -> ProtoGrid {
    ProtoGrid::new(w, h, Array::new(vec![h, w, d], data).unwrap()).unwrap()
}

fn onehot_grid(w: usize, h: usize, d: usize, pick: impl Fn(usize) -> usize) -> ProtoGrid {
    let mut data = vec![0.0; w * h * d];
    for cell in 0..w * h {
        data[cell * d + pick(cell)] = 1.0;
    }
    proto(w, h, d, data)
}

#[test]
fn alignment_examples() {
    let z = onehot_grid(3, 2, 4, |c| c % 4);
    let v = alignment_loss(&z, &z, EPS).unwrap();
    assert!((v - -(1.0f64 + EPS).ln()).abs() < 1e-12);

    let other = onehot_grid(3, 2, 4, |c| (c + 1) % 4);
    let v = alignment_loss(&z, &other, EPS).unwrap();
    assert!((v - 18.420680743952367).abs() < 1e-9, "{v}");

    let a = proto(1, 1, 2, vec![0.6, 0.4]);
    let b = proto(1, 1, 2, vec![0.5, 0.5]);
    let v = alignment_loss(&a, &b, EPS).unwrap();
    assert!((v - 0.6931).abs() < 1e-4);

    let c = proto(2, 1, 2, vec![0.5; 4]);
    assert!(matches!(alignment_loss(&a, &c, EPS), Err(Error::Shape(_))));
}

#[test]
fn tanh_examples() {
    let dead = BatchPresence::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
    assert!((tanh_loss(&dead, EPS).unwrap() - 18.420680743952367).abs() < 1e-6);

    let saturated = BatchPresence::from_rows(&vec![vec![1.0, 1.0]; 12]).unwrap();
    assert!(tanh_loss(&saturated, EPS).unwrap() < 1e-9);

    let one = BatchPresence::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let want = -(1.0f64.tanh() + EPS).ln();
    let v = tanh_loss(&one, EPS).unwrap();
    assert!((v - want).abs() < 1e-7);
    assert!((v - 0.27235).abs() < 1e-4);

    assert!(BatchPresence::from_rows(&[vec![1.5]]).is_err());
}

#[test]
fn koleo_examples() {
    let same = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
    assert!((koleo_loss(&same, EPS).unwrap() - 18.420680743952367).abs() < 1e-6);

    let antipodal = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    assert!((koleo_loss(&antipodal, EPS).unwrap() + 2.0f64.ln()).abs() < 1e-6);

    let pts = vec![vec![0.1, 0.3], vec![0.7, -0.2], vec![-0.4, 0.5]];
    let scaled: Vec<Vec<f32>> = pts.iter().map(|p| p.iter().map(|v| v * 3.0).collect()).collect();
    let shift = koleo_loss(&scaled, EPS).unwrap() - koleo_loss(&pts, EPS).unwrap();
    assert!((shift + 3.0f64.ln()).abs() < 1e-6);

    assert!(matches!(koleo_loss(&pts[..1], EPS), Err(Error::Precondition(_))));
}

#[test]
fn classification_examples() {
    let s = Array::new(vec![2, 2], vec![25.0, 2.0, -10.0, 11.0]).unwrap();
    assert!(classification_loss(&s, &[0, 1]).unwrap() < 1e-6);

    let s = Array::new(vec![3, 2], vec![0.3; 6]).unwrap();
    assert!((classification_loss(&s, &[0, 1, 1]).unwrap() - 2.0f64.ln()).abs() < 1e-7);

    let s = Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let oracle = -softmax(&Array::<f64>::vector(vec![1.0, 2.0, 3.0]), 0).unwrap().data()[2].ln();
    let v = classification_loss(&s, &[2]).unwrap();
    assert!((v - oracle).abs() < 1e-7);
    assert!((v - 0.4076).abs() < 1e-4);

    assert!(matches!(classification_loss(&s, &[3]), Err(Error::Data { .. })));
}

#[test]
fn objective_combinations() {
    let w = LossWeights::default();
    let c = Components {
        alignment: 0.7,
        tanh: 1.3,
        koleo: -0.4,
        classification: 0.9,
    };
    let at0 = pretrain_combination(c, &w, 0.0);
    assert_eq!(at0.lambda_align, 0.0);
    assert!((at0.total - (1.3 - 0.4)).abs() < 1e-12);

    let past = pretrain_combination(c, &w, 0.5);
    assert!((past.total - (0.7 + 1.3 - 0.4)).abs() < 1e-12);
    let half = pretrain_combination(c, &w, 0.1);
    assert!((half.lambda_align - 0.5).abs() < 1e-12);

    let only_align = LossWeights {
        lambda_tanh: 0.0,
        lambda_koleo: 0.0,
        ..LossWeights::default()
    };
    assert!((pretrain_combination(c, &only_align, 1.0).total - 0.7).abs() < 1e-12);

    let no_class = LossWeights {
        lambda_class: 0.0,
        ..LossWeights::default()
    };
    assert!((finetune_objective(c, &no_class).total - past.total).abs() < 1e-12);

    let zero = LossWeights {
        lambda_align: 0.0,
        lambda_tanh: 0.0,
        lambda_koleo: 0.0,
        lambda_class: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(finetune_objective(c, &zero).total, 0.0);
    assert!((finetune_objective(c, &w).total - (0.7 + 1.3 - 0.4 + 0.9)).abs() < 1e-12);
}

#[test]
fn pretrain_objective_from_raw_inputs() {
    let z = onehot_grid(2, 2, 3, |c| c % 3);
    let p = BatchPresence::from_rows(&[vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
    let vecs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let w = LossWeights::default();
    let b = pretrain_objective(&[z.clone(), z.clone()], &[z.clone(), z], &p, &vecs, &w, 1.0).unwrap();
    let recombined = b.lambda_align * b.alignment + w.lambda_tanh * b.tanh + w.lambda_koleo * b.koleo;
    assert!((b.total - recombined).abs() < 1e-6);
    assert!(b.alignment.abs() < 1e-7);
    assert!((b.koleo + 2.0f64.sqrt().ln()).abs() < 1e-7);
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        lambda_tanh: -1.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossWeights {
        warmup_fraction: 1.5,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn fd_check(g: &Graph<f64>, out: NodeId, name: &str, x: &Array<f64>, extra: &[(&str, &Array<f64>)]) {
    let bind = |probe: &Array<f64>| {
        let mut b: Bindings<f64> = extra.iter().copied().collect();
        b.insert(name, probe);
        g.forward(&b).and_then(|e| e.value(out).item())
    };
    let mut b: Bindings<f64> = extra.iter().copied().collect();
    b.insert(name, x);
    let (_, grads) = evaluate_with_gradients(g, &b, out).unwrap();
    let fd = finite_difference_gradient(|p| bind(p), x, 1e-4).unwrap();
    let worst = gradient_mismatch(&grads[name], &fd, 1e-4, 1e-6);
    assert!(worst <= 1.0, "{name}: {worst}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // alignment over softmaxed logits [B, T, D]
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.input("a"), g.input("b"));
        let (sa, sb) = (g.softmax(a, 2), g.softmax(b, 2));
        let out = alignment_term(&mut g, sa, sb, 3, EPS);
        let (xa, xb) = (random(&mut rng, &[2, 3, 4], -2.0, 2.0), random(&mut rng, &[2, 3, 4], -2.0, 2.0));
        fd_check(&g, out, "a", &xa, &[("b", &xb)]);

        let mut g = Graph::<f64>::new();
        let p = g.input("p");
        let out = tanh_term(&mut g, p, EPS);
        fd_check(&g, out, "p", &random(&mut rng, &[3, 5], 0.0, 0.6), &[]);

        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let xn = l2_normalize_rows(&mut g, x, 4);
        let out = koleo_term(&mut g, xn, 4, EPS);
        fd_check(&g, out, "x", &random(&mut rng, &[4, 6], -1.0, 1.0), &[]);

        let mut g = Graph::<f64>::new();
        let s = g.input("s");
        let oh = g.constant(onehot::<f64>(&[0, 2, 1], 3).unwrap());
        let out = classification_term(&mut g, s, oh, 3);
        fd_check(&g, out, "s", &random(&mut rng, &[3, 3], -3.0, 3.0), &[]);
    }
}

proptest! {
    #[test]
    fn self_alignment_is_optimal_for_onehot(picks in proptest::collection::vec(0usize..3, 4), noise in proptest::collection::vec(0.0f32..1.0, 12)) {
        let z = onehot_grid(2, 2, 3, |c| picks[c]);
        let mut data = Vec::new();
        for cell in 0..4 {
            let raw: Vec<f32> = (0..3).map(|d| noise[cell * 3 + d] + 1e-3).collect();
            let s: f32 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        let perturbed = proto(2, 2, 3, data);
        prop_assert!(alignment_loss(&z, &z, EPS).unwrap() <= alignment_loss(&z, &perturbed, EPS).unwrap());
    }

    #[test]
    fn tanh_decreases_when_dead_column_gains_mass(rows in proptest::collection::vec(proptest::collection::vec(0.0f32..0.3, 3), 2..5), mass in 0.01f32..0.9) {
        let mut rows = rows;
        for r in &mut rows { r[1] = 0.0; }
        let before = tanh_loss(&BatchPresence::from_rows(&rows).unwrap(), EPS).unwrap();
        rows[0][1] = mass;
        let after = tanh_loss(&BatchPresence::from_rows(&rows).unwrap(), EPS).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn koleo_is_permutation_invariant(pts in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 2..6), rot in 0usize..6) {
        let mut shuffled = pts.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = koleo_loss(&pts, EPS).unwrap();
        let b = koleo_loss(&shuffled, EPS).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn breakdown_recombines(a in 0.0f64..20.0, t in 0.0f64..20.0, k in -1.0f64..20.0, c in 0.0f64..5.0, step in 0.0f64..1.0) {
        let w = LossWeights { lambda_align: 0.7, lambda_tanh: 1.1, lambda_koleo: 0.3, lambda_class: 2.0, ..LossWeights::default() };
        let comps = Components { alignment: a, tanh: t, koleo: k, classification: c };
        let pre = pretrain_combination(comps, &w, step);
        prop_assert!((pre.total - (pre.lambda_align * a + 1.1 * t + 0.3 * k)).abs() < 1e-6);
        let fine = finetune_objective(comps, &w);
        prop_assert!((fine.total - (0.7 * a + 1.1 * t + 0.3 * k + 2.0 * c)).abs() < 1e-6);
    }
}
