//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every primitive applied through a [`Var`] appends a
//! node whose parents precede it, so the node order is a topological order.
//! [`Graph::backward`] walks the tape in reverse; [`Graph::replay`] walks it
//! forward and recomputes every derived value from the current leaf values.
//!
//! Gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grad`] is called.

use std::cell::{Ref, RefCell};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    /// Adds a vector of the last-axis width to every row.
    AddRow(usize, usize),
    Concat(Vec<usize>, usize),
    Transpose(usize),
    Reshape(usize, Vec<usize>),
    Mean(usize, usize),
    Sum(usize),
    Softmax(usize, usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize },
    L2Distance(usize, usize),
    Cosine(usize, usize),
    Normalize(usize),
    SliceCols { a: usize, start: usize, len: usize },
    GatherRows { table: usize, ids: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | L2Distance(a, b) | Cosine(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a, _) | Transpose(a) | Reshape(a, _) | Mean(a, _) | Sum(a)
            | Softmax(a, _) | Relu(a) | Gelu(a) | Sigmoid(a) | Normalize(a) => vec![*a],
            SliceCols { a, .. } => vec![*a],
            GatherRows { table, .. } => vec![*table],
            Concat(parts, _) => parts.clone(),
            LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op) -> Result<Var<'_>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = eval(&op, &nodes)?;
            let rg = op.parents().iter().any(|&p| nodes[p].requires_grad);
            (value, rg)
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    pub fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn grad(&self, id: usize) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(id)?.as_ref()?;
        let shape = self.nodes.borrow()[id].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Replace the value of a leaf; call [`Graph::replay`] to propagate.
    pub fn set_leaf(&self, var: Var<'_>, value: Tensor) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let node = &mut nodes[var.id];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("set_leaf on a derived node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Recompute every derived node from the current leaf values.
    pub fn replay(&self) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        for i in 0..nodes.len() {
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let v = eval(&nodes[i].op, &nodes[..i])?;
            nodes[i].value = v;
        }
        Ok(())
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let n_loss = &nodes[loss.id];
        if !n_loss.value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                n_loss.value.shape()
            )));
        }
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        // Local buffer so accumulation from earlier calls is kept intact.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(node, &g, &nodes, &mut local);
            accumulate(&mut grads[id], &g);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into(local: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut local[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

// ---------------------------------------------------------------------------
// Kernels

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `a[m,k] · b[n,k]ᵀ`
fn mm_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m,k]ᵀ · b[m,n]`
fn t_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(format!("{op} expects a matrix, got shape {s:?}"))),
    }
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

// ---------------------------------------------------------------------------
// Forward evaluation

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |i: usize| &nodes[i].value;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (m, k) = mat_dims("matmul", v(*a))?;
            let (k2, n) = mat_dims("matmul", v(*b))?;
            if k != k2 {
                return Err(Error::shape("matmul", v(*a).shape(), v(*b).shape()));
            }
            Tensor::from_parts(vec![m, n], mm(v(*a).data(), v(*b).data(), m, k, n))
        }
        Op::MatMulT(a, b) => {
            let (m, k) = mat_dims("matmul_t", v(*a))?;
            let (n, k2) = mat_dims("matmul_t", v(*b))?;
            if k != k2 {
                return Err(Error::shape("matmul_t", v(*a).shape(), v(*b).shape()));
            }
            Tensor::from_parts(vec![m, n], mm_t(v(*a).data(), v(*b).data(), m, k, n))
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (x, y) = (v(*a), v(*b));
            same_shape("elementwise", x, y)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |p, q| p + q,
                Op::Sub(..) => |p, q| p - q,
                _ => |p, q| p * q,
            };
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Scale(a, s) => map(v(*a), |x| x * s),
        Op::AddScalar(a, s) => map(v(*a), |x| x + s),
        Op::AddRow(a, b) => {
            let (x, r) = (v(*a), v(*b));
            let w = x.cols();
            if r.len() != w {
                return Err(Error::shape("add_row", x.shape(), r.shape()));
            }
            let mut data = x.data().to_vec();
            for chunk in data.chunks_mut(w) {
                chunk.iter_mut().zip(r.data()).for_each(|(p, q)| *p += q);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Concat(parts, axis) => {
            let first = v(parts[0]);
            if *axis >= first.rank() {
                return Err(Error::invalid(format!(
                    "concat axis {axis} out of range for rank {}",
                    first.rank()
                )));
            }
            let mut total = 0;
            for &p in parts {
                let s = v(p).shape();
                let ok = s.len() == first.rank()
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == *axis || x == y);
                if !ok {
                    return Err(Error::shape("concat", first.shape(), s));
                }
                total += s[*axis];
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            let (outer, _, inner) = axis_split(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &p in parts {
                    let t = v(p);
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Op::Transpose(a) => {
            let x = v(*a);
            let (r, c) = mat_dims("transpose", x)?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], data)
        }
        Op::Reshape(a, shape) => v(*a).reshaped(shape.clone())?,
        Op::Mean(a, axis) => {
            let x = v(*a);
            if *axis >= x.rank() {
                return Err(Error::invalid(format!("mean axis {axis} out of range")));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            data.iter_mut().for_each(|d| *d /= len as f64);
            let mut shape: Vec<usize> = x.shape().to_vec();
            shape.remove(*axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, data)
        }
        Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
        Op::Softmax(a, axis) => {
            let x = v(*a);
            if *axis >= x.rank() {
                return Err(Error::invalid(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    x.shape()
                )));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let mx = (0..len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..len {
                        let e = (data[idx(k)] - mx).exp();
                        data[idx(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        data[idx(k)] /= z;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::Relu(a) => map(v(*a), |x| x.max(0.0)),
        Op::Gelu(a) => map(v(*a), gelu),
        Op::Sigmoid(a) => map(v(*a), sigmoid),
        Op::LayerNorm { x, gamma, beta } => {
            let (x, g, b) = (v(*x), v(*gamma), v(*beta));
            let w = x.cols();
            if g.len() != w || b.len() != w {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(w) {
                let (mean, rstd) = layer_norm_stats(row);
                for j in 0..w {
                    data.push((row[j] - mean) * rstd * g.data()[j] + b.data()[j]);
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::L2Distance(a, b) => {
            same_shape("l2_distance", v(*a), v(*b))?;
            let d: f64 = v(*a)
                .data()
                .iter()
                .zip(v(*b).data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            Tensor::scalar(d.sqrt())
        }
        Op::Cosine(a, b) => {
            same_shape("cosine_similarity", v(*a), v(*b))?;
            let (x, y) = (v(*a).data(), v(*b).data());
            let denom = norm(x) * norm(y);
            if denom == 0.0 {
                return Err(Error::invalid("cosine similarity of a zero vector"));
            }
            Tensor::scalar(dot(x, y) / denom)
        }
        Op::Normalize(a) => {
            let x = v(*a);
            let n = norm(x.data());
            if n == 0.0 {
                return Err(Error::invalid("cannot normalize a zero vector"));
            }
            map(x, |e| e / n)
        }
        Op::SliceCols { a, start, len } => {
            let x = v(*a);
            let (r, c) = mat_dims("slice_cols", x)?;
            if start + len > c || *len == 0 {
                return Err(Error::invalid(format!(
                    "column slice {start}..{} out of range for width {c}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
            }
            Tensor::from_parts(vec![r, *len], data)
        }
        Op::GatherRows { table, ids } => {
            let t = v(*table);
            let (r, c) = mat_dims("gather_rows", t)?;
            if ids.is_empty() {
                return Err(Error::invalid("gather_rows with no ids"));
            }
            let mut data = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                if i >= r {
                    return Err(Error::invalid(format!("row id {i} out of range for {r} rows")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![ids.len(), c], data)
        }
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&e| f(e)).collect())
}

// ---------------------------------------------------------------------------
// Reverse rules

fn backprop(node: &Node, g: &[f64], nodes: &[Node], local: &mut [Option<Vec<f64>>]) {
    let v = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (v(*a).rows(), v(*a).cols());
            let n = v(*b).cols();
            if wants(nodes, *a) {
                add_into(local, nodes, *a, mm_t(g, v(*b).data(), m, n, k));
            }
            if wants(nodes, *b) {
                add_into(local, nodes, *b, t_mm(v(*a).data(), g, m, k, n));
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k) = (v(*a).rows(), v(*a).cols());
            let n = v(*b).rows();
            if wants(nodes, *a) {
                add_into(local, nodes, *a, mm(g, v(*b).data(), m, n, k));
            }
            if wants(nodes, *b) {
                add_into(local, nodes, *b, t_mm(g, v(*a).data(), m, n, k));
            }
        }
        Op::Add(a, b) => {
            add_into(local, nodes, *a, g.to_vec());
            add_into(local, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(local, nodes, *a, g.to_vec());
            add_into(local, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let ga = g.iter().zip(v(*b).data()).map(|(p, q)| p * q).collect();
                add_into(local, nodes, *a, ga);
            }
            if wants(nodes, *b) {
                let gb = g.iter().zip(v(*a).data()).map(|(p, q)| p * q).collect();
                add_into(local, nodes, *b, gb);
            }
        }
        Op::Scale(a, s) => add_into(local, nodes, *a, g.iter().map(|x| x * s).collect()),
        Op::AddScalar(a, _) | Op::Reshape(a, _) => add_into(local, nodes, *a, g.to_vec()),
        Op::AddRow(a, b) => {
            add_into(local, nodes, *a, g.to_vec());
            if wants(nodes, *b) {
                let w = v(*b).len();
                let mut gb = vec![0.0; w];
                for chunk in g.chunks(w) {
                    gb.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                }
                add_into(local, nodes, *b, gb);
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let total_block = node.value.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let block = v(p).shape()[*axis] * inner;
                if wants(nodes, p) {
                    let mut gp = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let s = o * total_block + offset;
                        gp.extend_from_slice(&g[s..s + block]);
                    }
                    add_into(local, nodes, p, gp);
                }
                offset += block;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (v(*a).rows(), v(*a).cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            add_into(local, nodes, *a, ga);
        }
        Op::Mean(a, axis) => {
            let (outer, len, inner) = axis_split(v(*a).shape(), *axis);
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        ga[(o * len + k) * inner + i] = g[o * inner + i] / len as f64;
                    }
                }
            }
            add_into(local, nodes, *a, ga);
        }
        Op::Sum(a) => add_into(local, nodes, *a, vec![g[0]; v(*a).len()]),
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let s: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        ga[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                    }
                }
            }
            add_into(local, nodes, *a, ga);
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(v(*a).data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            add_into(local, nodes, *a, ga);
        }
        Op::Gelu(a) => {
            let ga = g.iter().zip(v(*a).data()).map(|(gi, &x)| gi * gelu_grad(x)).collect();
            add_into(local, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.iter().zip(node.value.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect();
            add_into(local, nodes, *a, ga);
        }
        Op::LayerNorm { x, gamma, beta } => {
            let xv = v(*x);
            let gam = v(*gamma).data();
            let w = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            let mut gg = vec![0.0; w];
            let mut gb = vec![0.0; w];
            let mut xhat = vec![0.0; w];
            let mut dxhat = vec![0.0; w];
            for (r, row) in xv.data().chunks(w).enumerate() {
                let (mean, rstd) = layer_norm_stats(row);
                let grow = &g[r * w..(r + 1) * w];
                for j in 0..w {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = grow[j] * gam[j];
                    gg[j] += grow[j] * xhat[j];
                    gb[j] += grow[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / w as f64;
                let m2 = dot(&dxhat, &xhat) / w as f64;
                for j in 0..w {
                    gx[r * w + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            add_into(local, nodes, *x, gx);
            add_into(local, nodes, *gamma, gg);
            add_into(local, nodes, *beta, gb);
        }
        Op::L2Distance(a, b) => {
            let d = node.value.item();
            let (x, y) = (v(*a).data(), v(*b).data());
            // Subgradient 0 at coincident points.
            let unit: Vec<f64> = if d > 0.0 {
                x.iter().zip(y).map(|(p, q)| (p - q) / d).collect()
            } else {
                vec![0.0; x.len()]
            };
            add_into(local, nodes, *a, unit.iter().map(|u| g[0] * u).collect());
            add_into(local, nodes, *b, unit.iter().map(|u| -g[0] * u).collect());
        }
        Op::Cosine(a, b) => {
            let (x, y) = (v(*a).data(), v(*b).data());
            let (nx, ny) = (norm(x), norm(y));
            let c = node.value.item();
            if wants(nodes, *a) {
                let ga = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| g[0] * (q / (nx * ny) - c * p / (nx * nx)))
                    .collect();
                add_into(local, nodes, *a, ga);
            }
            if wants(nodes, *b) {
                let gb = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| g[0] * (p / (nx * ny) - c * q / (ny * ny)))
                    .collect();
                add_into(local, nodes, *b, gb);
            }
        }
        Op::Normalize(a) => {
            let y = node.value.data();
            let n = norm(v(*a).data());
            let yg = dot(y, g);
            let ga = g.iter().zip(y).map(|(gi, yi)| (gi - yi * yg) / n).collect();
            add_into(local, nodes, *a, ga);
        }
        Op::SliceCols { a, start, len } => {
            let (r, c) = (v(*a).rows(), v(*a).cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                ga[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            add_into(local, nodes, *a, ga);
        }
        Op::GatherRows { table, ids } => {
            let t = v(*table);
            let c = t.cols();
            let mut gt = vec![0.0; t.len()];
            for (r, &i) in ids.iter().enumerate() {
                gt[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&g[r * c..(r + 1) * c])
                    .for_each(|(p, q)| *p += q);
            }
            add_into(local, nodes, *table, gt);
        }
    }
}

// ---------------------------------------------------------------------------
// Var API

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value(self.id).shape().to_vec()
    }

    /// First element; the whole value for scalars.
    pub fn item(&self) -> f64 {
        self.graph.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(self.id)
    }

    fn check_same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn binary(&self, other: Var<'g>, f: fn(usize, usize) -> Op) -> Result<Var<'g>> {
        self.check_same_graph(&other);
        self.graph.push(f(self.id, other.id))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::MatMul)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::MatMulT)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul)
    }

    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.binary(row, Op::AddRow)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        self.graph.push(Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'g>> {
        self.graph.push(Op::AddScalar(self.id, s))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        self.graph.push(Op::Reshape(self.id, shape.to_vec()))
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'g>> {
        self.graph.push(Op::Mean(self.id, axis))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Sum(self.id))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        self.graph.push(Op::Softmax(self.id, axis))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Relu(self.id))
    }

    /// tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Sigmoid(self.id))
    }

    /// Normalizes over the last axis (ε = 1e-5), then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&gamma);
        self.check_same_graph(&beta);
        self.graph.push(Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
        })
    }

    pub fn l2_distance(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::L2Distance)
    }

    pub fn cosine_similarity(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Cosine)
    }

    /// Divides the whole tensor by its Frobenius norm.
    pub fn normalize(&self) -> Result<Var<'g>> {
        self.graph.push(Op::Normalize(self.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        self.graph.push(Op::SliceCols {
            a: self.id,
            start,
            len,
        })
    }

    /// Rows of a `[rows, width]` table, in `ids` order.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        self.graph.push(Op::GatherRows {
            table: self.id,
            ids: ids.to_vec(),
        })
    }
}

pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    for p in parts {
        first.check_same_graph(p);
    }
    first
        .graph
        .push(Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
}

/// Stacks scalars into a vector.
pub fn stack_scalars<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let flat = parts
        .iter()
        .map(|p| p.reshape(&[1]))
        .collect::<Result<Vec<_>>>()?;
    concat(&flat, 0)
}

/// Stacks equal-length vectors as the rows of a matrix.
pub fn stack_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let rows = parts
        .iter()
        .map(|p| {
            let n = p.graph.value(p.id).len();
            p.reshape(&[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&rows, 0)
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates of `point`, using central differences with step `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let eval_at = |p: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.leaf(p.clone());
        let y = f(&g, x)?;
        let v = g.value(y.id);
        if !v.is_scalar() {
            return Err(Error::invalid("grad_check function must be scalar-valued"));
        }
        Ok(v.item())
    };
    let first = eval_at(point)?;
    let second = eval_at(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    g.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
