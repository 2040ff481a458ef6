//! AdamW with decoupled weight decay, cosine learning-rate schedule and
//! global-norm gradient clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::numerics::Array;

/// Linear warm-up over the first `warmup_fraction` of steps, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_fraction).round() as usize).min(total_steps);
        CosineSchedule {
            base,
            total_steps,
            warmup_steps,
        }
    }

    /// Learning rate for the zero-based step `t`.
    pub fn at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.base * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((t - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroup {
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }
}

impl AdamW {
    /// Forgets the moments of `name`, e.g. after the parameter changed shape.
    pub fn reset(&mut self, name: &str) {
        self.state.remove(name);
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new step; every `update` until the next `begin_step` uses its bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Array, grad: &Array, lr: f64, group: ParamGroup) {
        debug_assert_eq!(param.shape(), grad.shape());
        let n = param.len();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let lr = lr * group.lr_scale;
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g as f64;
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let mut x = *p as f64;
            x -= lr * group.weight_decay * x;
            x -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps);
            *p = x as f32;
        }
    }
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Array>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Array>, max_norm: f64) -> f64 {
    let grads: Vec<&mut Array> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
