//! Central finite differences, used as the independent oracle for every
//! reverse-mode gradient in the crate.

use super::array::{Array, Element};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient<T, F>(f: F, x: &Array<T>, h: f64) -> Result<Array<T>>
where
    T: Element,
    F: Fn(&Array<T>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of_f64(orig.as_f64() + h);
        let fp = f(&probe)?;
        probe.data_mut()[i] = T::of_f64(orig.as_f64() - h);
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric {
                node: format!("finite difference coordinate {i}"),
                detail: "function evaluated to a non-finite value".into(),
            });
        }
        out.push(T::of_f64((fp - fm) / (2.0 * h)));
    }
    Array::new(x.shape().to_vec(), out)
}

/// Worst violation of `|a - b| <= max(rel * max(|a|,|b|), abs)` over all entries;
/// values <= 1 mean the arrays agree.
pub fn gradient_mismatch<T: Element>(analytic: &Array<T>, numeric: &Array<T>, rel: f64, abs: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            let tol = (rel * a.abs().max(n.abs())).max(abs);
            (a - n).abs() / tol
        })
        .fold(0.0, f64::max)
}
