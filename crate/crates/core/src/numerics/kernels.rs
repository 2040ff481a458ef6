//! Raw loops behind the graph operations.

use super::array::{numel, Element};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 && out[i + pad] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `visit(out_index, a_offset, b_offset)` over the broadcast of two shapes.
fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            visit(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        visit(i, oa, ob);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if counter[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let mut out = vec![T::zero(); numel(&out_shape)];
    if b.len() == 1 {
        let s = b[0];
        for (o, &x) in out.iter_mut().zip(a) {
            *o = f(x, s);
        }
    } else {
        for_each_broadcast(a_shape, b_shape, &out_shape, |i, ia, ib| {
            out[i] = f(a[ia], b[ib]);
        });
    }
    Ok((out_shape, out))
}

/// Product of `grad` (broadcast shape) with the other operand, reduced onto `target`.
pub(crate) fn reduce_product_to<T: Element>(
    grad: &[T],
    out_shape: &[usize],
    other: Option<(&[T], &[usize])>,
    target: &[usize],
) -> Vec<T> {
    let mut acc = vec![0.0f64; numel(target)];
    match other {
        None => {
            if target == out_shape {
                return grad.to_vec();
            }
            for_each_broadcast(target, target, out_shape, |i, it, _| {
                acc[it] += grad[i].as_f64();
            });
        }
        Some((vals, vshape)) => {
            if target == out_shape && vshape == out_shape {
                return grad.iter().zip(vals).map(|(&g, &v)| g * v).collect();
            }
            for_each_broadcast(target, vshape, out_shape, |i, it, iv| {
                acc[it] += grad[i].as_f64() * vals[iv].as_f64();
            });
        }
    }
    acc.into_iter().map(T::of_f64).collect()
}

/// Layout of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single matrix shared across the batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {a:?} x {b:?}"
        )));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.is_empty();
    if !shared_rhs && a_batch != b_batch {
        return Err(Error::shape(format!(
            "matmul batch dimensions differ: {a:?} x {b:?}"
        )));
    }
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatmulDims {
            batch: numel(a_batch),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// c[m,n] = a[m,k] · b[k,n]
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.as_f64();
            }
        }
        for (o, &s) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of_f64(s);
        }
    }
}

/// c[m,k] = g[m,n] · b[k,n]ᵀ
pub(crate) fn gemm_nt<T: Element>(g: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x.as_f64() * y.as_f64())
                .sum();
            c[i * k + p] = T::of_f64(s);
        }
    }
}

/// acc[k,n] += a[m,k]ᵀ · g[m,n]
pub(crate) fn gemm_tn_acc<T: Element>(
    a: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [f64],
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            for (s, &gv) in acc[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *s += av * gv.as_f64();
            }
        }
    }
}

/// Output shape and inverse permutation for an axis permutation.
pub(crate) fn transpose_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape(format!(
            "permutation {perm:?} does not match rank of {shape:?}"
        )));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

pub(crate) fn transpose<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
