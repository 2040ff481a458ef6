//! Define-then-evaluate differentiable graphs over a closed operation set.
//!
//! A [`Graph`] is an ordered list of operation records. Records can only refer
//! to earlier records, so insertion order is a topological order and the graph
//! is acyclic by construction. [`Graph::forward`] evaluates every record and
//! keeps all intermediate values; [`Graph::backward`] walks the records in
//! reverse and accumulates exact vector-Jacobian products.

use std::collections::{BTreeMap, HashMap};

use super::array::{axis_split, numel, Array, Element};
use super::kernels;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Input(String),
    Constant(Array<T>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Power(NodeId, f64),
    MaxReduce(NodeId, usize),
    SumReduce(NodeId, usize),
    MeanReduce(NodeId, usize),
    Softmax(NodeId, usize),
    /// Normalization over the last axis, without affine parameters.
    LayerNorm(NodeId, f64),
    Reshape(NodeId, Vec<usize>),
    Transpose(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    /// Euclidean norm over the last axis.
    L2Norm(NodeId),
}

impl<T> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Power(..) => "power",
            Op::MaxReduce(..) => "max",
            Op::SumReduce(..) => "sum",
            Op::MeanReduce(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::L2Norm(_) => "l2_norm",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Power(a, _)
            | Op::MaxReduce(a, _)
            | Op::SumReduce(a, _)
            | Op::MeanReduce(a, _)
            | Op::Softmax(a, _)
            | Op::LayerNorm(a, _)
            | Op::Reshape(a, _)
            | Op::Transpose(a, _)
            | Op::L2Norm(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    label: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
}

/// Named arrays bound to a graph's inputs for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a, T> {
    map: HashMap<&'a str, &'a Array<T>>,
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Bindings {
            map: HashMap::new(),
        }
    }

    pub fn bind(mut self, name: &'a str, value: &'a Array<T>) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Array<T>) {
        self.map.insert(name, value);
    }
}

impl<'a, T> FromIterator<(&'a str, &'a Array<T>)> for Bindings<'a, T> {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a Array<T>)>>(iter: I) -> Self {
        Bindings {
            map: iter.into_iter().collect(),
        }
    }
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    values: Vec<Array<T>>,
}

impl<T: Element> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn take(mut self, id: NodeId) -> Array<T> {
        std::mem::replace(&mut self.values[id.0], Array::scalar(T::zero()))
    }
}

/// Gradients keyed by input name. Inputs with no path to the output get zeros.
pub type Gradients<T> = BTreeMap<String, Array<T>>;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op<T> {
        &self.nodes[id.0].op
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "node {p:?} is not part of this graph");
        }
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable name used in numeric-failure reports.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn node_name(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.label, &node.op) {
            (Some(l), _) => l.clone(),
            (None, Op::Input(name)) => name.clone(),
            (None, op) => format!("#{} {}", id.0, op.kind()),
        }
    }

    /// Declares a named input; declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(T::of_f64(value)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn power(&mut self, a: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Power(a, exponent))
    }

    pub fn max(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::MaxReduce(a, axis))
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumReduce(a, axis))
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::MeanReduce(a, axis))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(a, axis))
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm(a, eps))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn transpose(&mut self, a: NodeId, perm: Vec<usize>) -> NodeId {
        self.push(Op::Transpose(a, perm))
    }

    pub fn concat(&mut self, xs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat(xs, axis))
    }

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2Norm(a))
    }

    // Composites over the closed set.

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        let c = self.scalar(value);
        self.add(a, c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn min(&mut self, a: NodeId, axis: usize) -> NodeId {
        let na = self.neg(a);
        let m = self.max(na, axis);
        self.neg(m)
    }

    /// Sum over every axis of an array of known rank.
    pub fn sum_all(&mut self, a: NodeId, rank: usize) -> NodeId {
        let mut x = a;
        for _ in 0..rank {
            x = self.sum(x, 0);
        }
        x
    }

    /// Mean over every axis of an array of known rank.
    pub fn mean_all(&mut self, a: NodeId, rank: usize) -> NodeId {
        let mut x = a;
        for _ in 0..rank {
            x = self.mean(x, 0);
        }
        x
    }

    /// The tanh approximation of GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let cube = self.power(x, 3.0);
        let cube = self.scale(cube, 0.044715);
        let inner = self.add(x, cube);
        let inner = self.scale(inner, (2.0 / std::f64::consts::PI).sqrt());
        let t = self.tanh(inner);
        let t = self.add_scalar(t, 1.0);
        let half_x = self.scale(x, 0.5);
        self.mul(half_x, t)
    }

    /// Evaluates every record in insertion order.
    pub fn forward(&self, inputs: &Bindings<'_, T>) -> Result<Evaluation<T>> {
        let mut values: Vec<Array<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = self
                .eval_node(&node.op, &values, inputs)
                .map_err(|e| match e {
                    Error::Shape(msg) => {
                        Error::Shape(format!("{} at `{}`", msg, self.node_name(NodeId(idx))))
                    }
                    other => other,
                })?;
            if !v.all_finite() {
                return Err(Error::Numeric {
                    node: self.node_name(NodeId(idx)),
                    detail: format!("{} produced a non-finite value", node.op.kind()),
                });
            }
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    fn eval_node(
        &self,
        op: &Op<T>,
        values: &[Array<T>],
        inputs: &Bindings<'_, T>,
    ) -> Result<Array<T>> {
        let v = |id: &NodeId| &values[id.0];
        Ok(match op {
            Op::Input(name) => (*inputs.map.get(name.as_str()).ok_or_else(|| {
                Error::Contract(format!("no value bound for graph input `{name}`"))
            })?)
            .clone(),
            Op::Constant(a) => a.clone(),
            Op::Add(a, b) => {
                let (a, b) = (v(a), v(b));
                let (shape, data) =
                    kernels::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), |x, y| x + y)?;
                Array::new(shape, data)?
            }
            Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (shape, data) =
                    kernels::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), |x, y| x * y)?;
                Array::new(shape, data)?
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (d, shape) = kernels::matmul_dims(a.shape(), b.shape())?;
                let mut out = vec![T::zero(); numel(&shape)];
                for bi in 0..d.batch {
                    let aa = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                    let bb = if d.shared_rhs {
                        b.data()
                    } else {
                        &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
                    };
                    kernels::gemm_nn(aa, bb, d.m, d.k, d.n, &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n]);
                }
                Array::new(shape, out)?
            }
            Op::Exp(a) => v(a).map(|x| x.exp()),
            Op::Log(a) => v(a).map(|x| x.ln()),
            Op::Tanh(a) => v(a).map(|x| x.tanh()),
            Op::Power(a, p) => {
                let p = *p;
                v(a).map(|x| T::of_f64(x.as_f64().powf(p)))
            }
            Op::MaxReduce(a, axis) => reduce(v(a), *axis, |xs| {
                xs.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max)
            })?,
            Op::SumReduce(a, axis) => {
                reduce(v(a), *axis, |xs| xs.iter().map(|x| x.as_f64()).sum())?
            }
            Op::MeanReduce(a, axis) => reduce(v(a), *axis, |xs| {
                xs.iter().map(|x| x.as_f64()).sum::<f64>() / xs.len() as f64
            })?,
            Op::Softmax(a, axis) => softmax_forward(v(a), *axis)?,
            Op::LayerNorm(a, eps) => layer_norm_forward(v(a), *eps)?,
            Op::Reshape(a, shape) => v(a).clone().reshape(shape.clone())?,
            Op::Transpose(a, perm) => {
                let a = v(a);
                let shape = kernels::transpose_shape(a.shape(), perm)?;
                Array::new(shape, kernels::transpose(a.data(), a.shape(), perm))?
            }
            Op::Concat(xs, axis) => concat_forward(&xs.iter().map(v).collect::<Vec<_>>(), *axis)?,
            Op::L2Norm(a) => {
                let a = v(a);
                let last = check_last_axis(a)?;
                reduce(a, last, |xs| {
                    xs.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
                })?
            }
        })
    }

    /// Reverse-mode pass seeded with `seed` (same shape as `output`).
    pub fn backward(
        &self,
        eval: &Evaluation<T>,
        output: NodeId,
        seed: Array<T>,
    ) -> Result<Gradients<T>> {
        if seed.shape() != eval.value(output).shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                eval.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for (i, node) in self.nodes[..n].iter().enumerate() {
            needs[i] = match &node.op {
                Op::Input(_) => true,
                Op::Constant(_) => false,
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; n];
        grads[output.0] = Some(seed);
        for idx in (0..n).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.all_finite() {
                return Err(Error::Numeric {
                    node: self.node_name(NodeId(idx)),
                    detail: "non-finite gradient".into(),
                });
            }
            let op = &self.nodes[idx].op;
            if let Op::Input(_) = op {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.vjp(op, eval, NodeId(idx), &g, &needs)? {
                accumulate(&mut grads[parent.0], pg);
            }
        }
        let mut out = Gradients::new();
        for (name, &id) in &self.inputs {
            let grad = if id.0 < n {
                grads[id.0].take()
            } else {
                None
            };
            let grad = grad.unwrap_or_else(|| {
                Array::zeros(eval.values.get(id.0).map(|v| v.shape()).unwrap_or(&[]))
            });
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn vjp(
        &self,
        op: &Op<T>,
        eval: &Evaluation<T>,
        me: NodeId,
        g: &Array<T>,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Array<T>)>> {
        let v = |id: &NodeId| eval.value(*id);
        let y = eval.value(me);
        let mut out = Vec::new();
        match op {
            Op::Input(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                for p in [a, b] {
                    if needs[p.0] {
                        let data = kernels::reduce_product_to(g.data(), g.shape(), None, v(p).shape());
                        out.push((*p, Array::new(v(p).shape().to_vec(), data)?));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, q) in [(a, b), (b, a)] {
                    if needs[p.0] {
                        let other = v(q);
                        let data = kernels::reduce_product_to(
                            g.data(),
                            g.shape(),
                            Some((other.data(), other.shape())),
                            v(p).shape(),
                        );
                        out.push((*p, Array::new(v(p).shape().to_vec(), data)?));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (d, _) = kernels::matmul_dims(av.shape(), bv.shape())?;
                if needs[a.0] {
                    let mut ga = vec![T::zero(); av.len()];
                    for bi in 0..d.batch {
                        let gg = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let bb = if d.shared_rhs {
                            bv.data()
                        } else {
                            &bv.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
                        };
                        kernels::gemm_nt(gg, bb, d.m, d.k, d.n, &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k]);
                    }
                    out.push((*a, Array::new(av.shape().to_vec(), ga)?));
                }
                if needs[b.0] {
                    let mut acc = vec![0.0f64; bv.len()];
                    for bi in 0..d.batch {
                        let aa = &av.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                        let gg = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let dst = if d.shared_rhs {
                            &mut acc[..]
                        } else {
                            &mut acc[bi * d.k * d.n..(bi + 1) * d.k * d.n]
                        };
                        kernels::gemm_tn_acc(aa, gg, d.m, d.k, d.n, dst);
                    }
                    let gb = acc.into_iter().map(T::of_f64).collect();
                    out.push((*b, Array::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::Exp(a) => out.push((*a, zip_map(g, y, |g, y| g * y)?)),
            Op::Log(a) => out.push((*a, zip_map(g, v(a), |g, x| g / x)?)),
            Op::Tanh(a) => out.push((*a, zip_map(g, y, |g, y| g * (1.0 - y * y))?)),
            Op::Power(a, p) => {
                let p = *p;
                out.push((*a, zip_map(g, v(a), |g, x| g * p * x.powf(p - 1.0))?));
            }
            Op::MaxReduce(a, axis) => {
                let x = v(a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut best = 0;
                        for j in 1..len {
                            if x.data()[base + j * inner] > x.data()[base + best * inner] {
                                best = j;
                            }
                        }
                        gx[base + best * inner] = g.data()[o * inner + i];
                    }
                }
                out.push((*a, Array::new(x.shape().to_vec(), gx)?));
            }
            Op::SumReduce(a, axis) | Op::MeanReduce(a, axis) => {
                let x = v(a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let scale = if matches!(op, Op::MeanReduce(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] =
                                T::of_f64(g.data()[o * inner + i].as_f64() * scale);
                        }
                    }
                }
                out.push((*a, Array::new(x.shape().to_vec(), gx)?));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g.data()[idx(j)].as_f64() * y.data()[idx(j)].as_f64())
                            .sum();
                        for j in 0..len {
                            let yj = y.data()[idx(j)].as_f64();
                            gx[idx(j)] = T::of_f64(yj * (g.data()[idx(j)].as_f64() - dot));
                        }
                    }
                }
                out.push((*a, Array::new(y.shape().to_vec(), gx)?));
            }
            Op::LayerNorm(a, eps) => {
                let x = v(a);
                let len = *x.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); x.len()];
                for (row, ((xr, gr), yr)) in x
                    .data()
                    .chunks(len)
                    .zip(g.data().chunks(len))
                    .zip(y.data().chunks(len))
                    .enumerate()
                {
                    let (_, inv_std) = moments(xr, *eps);
                    let mg = gr.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64;
                    let mgy = gr
                        .iter()
                        .zip(yr)
                        .map(|(g, y)| g.as_f64() * y.as_f64())
                        .sum::<f64>()
                        / len as f64;
                    for j in 0..len {
                        let val = inv_std * (gr[j].as_f64() - mg - yr[j].as_f64() * mgy);
                        gx[row * len + j] = T::of_f64(val);
                    }
                }
                out.push((*a, Array::new(x.shape().to_vec(), gx)?));
            }
            Op::Reshape(a, _) => out.push((*a, g.clone().reshape(v(a).shape().to_vec())?)),
            Op::Transpose(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                let data = kernels::transpose(g.data(), g.shape(), &inv);
                out.push((*a, Array::new(v(a).shape().to_vec(), data)?));
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut start = 0;
                for p in xs {
                    let shape = v(p).shape().to_vec();
                    let len = shape[*axis];
                    if needs[p.0] {
                        let mut part = Vec::with_capacity(numel(&shape));
                        for o in 0..outer {
                            let from = (o * total + start) * inner;
                            part.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        out.push((*p, Array::new(shape, part)?));
                    }
                    start += len;
                }
            }
            Op::L2Norm(a) => {
                let x = v(a);
                let len = *x.shape().last().unwrap_or(&1);
                let mut gx = vec![T::zero(); x.len()];
                for (row, xr) in x.data().chunks(len).enumerate() {
                    let norm = y.data()[row].as_f64();
                    if norm == 0.0 {
                        continue;
                    }
                    let gr = g.data()[row].as_f64();
                    for j in 0..len {
                        gx[row * len + j] = T::of_f64(gr * xr[j].as_f64() / norm);
                    }
                }
                out.push((*a, Array::new(x.shape().to_vec(), gx)?));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Array<T>>, g: Array<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
}

fn zip_map<T: Element>(g: &Array<T>, x: &Array<T>, f: impl Fn(f64, f64) -> f64) -> Result<Array<T>> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| T::of_f64(f(g.as_f64(), x.as_f64())))
        .collect();
    Array::new(x.shape().to_vec(), data)
}

fn check_axis<T: Element>(a: &Array<T>, axis: usize) -> Result<()> {
    if axis >= a.ndim() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {:?}",
            a.shape()
        )));
    }
    Ok(())
}

fn check_last_axis<T: Element>(a: &Array<T>) -> Result<usize> {
    if a.ndim() == 0 {
        return Err(Error::shape("operation needs an array of rank >= 1"));
    }
    Ok(a.ndim() - 1)
}

fn reduce<T: Element>(a: &Array<T>, axis: usize, f: impl Fn(&[T]) -> f64) -> Result<Array<T>> {
    check_axis(a, axis)?;
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    let mut out = Vec::with_capacity(outer * inner);
    let mut buf = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            if inner == 1 {
                let base = o * len;
                out.push(T::of_f64(f(&a.data()[base..base + len])));
            } else {
                buf.clear();
                buf.extend((0..len).map(|j| a.data()[(o * len + j) * inner + i]));
                out.push(T::of_f64(f(&buf)));
            }
        }
    }
    Array::new(shape, out)
}

pub(crate) fn softmax_forward<T: Element>(a: &Array<T>, axis: usize) -> Result<Array<T>> {
    check_axis(a, axis)?;
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let mut out = vec![T::zero(); a.len()];
    let mut e = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len)
                .map(|j| a.data()[idx(j)].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                e[j] = (a.data()[idx(j)].as_f64() - m).exp();
                s += e[j];
            }
            for j in 0..len {
                out[idx(j)] = T::of_f64(e[j] / s);
            }
        }
    }
    Array::new(a.shape().to_vec(), out)
}

fn moments<T: Element>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|v| (v.as_f64() - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layer_norm_forward<T: Element>(a: &Array<T>, eps: f64) -> Result<Array<T>> {
    check_last_axis(a)?;
    let len = *a.shape().last().unwrap();
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks(len) {
        let (mean, inv_std) = moments(row, eps);
        out.extend(row.iter().map(|v| T::of_f64((v.as_f64() - mean) * inv_std)));
    }
    Array::new(a.shape().to_vec(), out)
}

fn concat_forward<T: Element>(xs: &[&Array<T>], axis: usize) -> Result<Array<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero arrays"))?;
    check_axis(first, axis)?;
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for x in xs {
        let mut s = x.shape().to_vec();
        if s.len() != shape.len() {
            return Err(Error::shape("concat operands differ in rank"));
        }
        total += s[axis];
        s[axis] = shape[axis];
        if s != shape {
            return Err(Error::shape(format!(
                "concat operands {:?} and {:?} differ off axis {axis}",
                first.shape(),
                x.shape()
            )));
        }
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    Array::new(shape, out)
}

/// Forward pass plus gradients of a scalar output with respect to every input.
pub fn evaluate_with_gradients<T: Element>(
    graph: &Graph<T>,
    inputs: &Bindings<'_, T>,
    output: NodeId,
) -> Result<(Array<T>, Gradients<T>)> {
    let eval = graph.forward(inputs)?;
    let value = eval.value(output).clone();
    if value.len() != 1 {
        return Err(Error::Contract(format!(
            "gradients requested for non-scalar output of shape {:?}",
            value.shape()
        )));
    }
    let seed = Array::full(value.shape(), T::one());
    let grads = graph.backward(&eval, output, seed)?;
    Ok((value, grads))
}
