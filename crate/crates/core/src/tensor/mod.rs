//! Dense f64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so the tape is already topologically sorted
//! and [`Graph::backward`] is a single reverse sweep. Handles into the tape
//! are plain [`Var`] indices.

mod kernels;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::par::Execution;

pub use kernels::{ConvGeom, BN_DEFAULT_EPS};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("tensor dims must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} holds {n} values, got {}", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n]).expect("full: dims must be positive")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data).expect("from_vec: empty data")
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape, data).expect("randn: dims must be positive")
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("rand_uniform: dims must be positive")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    fn value_only(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), grad: None, requires_grad: false }
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnKind {
    Neg,
    Log,
    Exp,
    Relu,
    Sigmoid,
    Clip(f64, f64),
    AddScalar,
    MulScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var, ia: Option<Vec<usize>>, ib: Option<Vec<usize>> },
    Unary { kind: UnKind, x: Var },
    Reduce { kind: ReduceKind, x: Var, map: Vec<usize>, count: usize, argmax: Vec<usize> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    PadReplicate { x: Var, axis: usize, before: usize },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    AvgPool2 { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
    params: HashMap<usize, Var>,
    exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
/// `None` when no broadcasting happens.
fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let offset = out.len() - src.len();
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// A graph that rejects division by zero.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), strict: true, params: HashMap::new(), exec: Execution::default() }
    }

    /// A graph that lets division by zero produce infinities.
    pub fn lenient() -> Self {
        Graph { strict: false, ..Self::new() }
    }

    /// Runs the heavy kernels of this graph with `exec`.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => self.ng(*a) || self.ng(*b),
            Op::Unary { x, .. }
            | Op::Reduce { x, .. }
            | Op::Slice { x, .. }
            | Op::PadReplicate { x, .. }
            | Op::Reshape { x }
            | Op::AvgPool2 { x } => self.ng(*x),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.ng(*p)),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(b))
            }
            Op::BatchNorm { x, gamma, beta, .. } => self.ng(*x) || self.ng(*gamma) || self.ng(*beta),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Binds an external parameter under `key`, reusing the leaf if the key
    /// was already bound on this graph.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t.value_only().with_requires_grad(true));
        self.params.insert(key, v);
        v
    }

    /// `(key, leaf)` pairs bound through [`Graph::param`].
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ia = broadcast_map(&sa, &out_shape);
        let ib = broadcast_map(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[ia.as_ref().map_or(i, |m| m[i])];
            let y = db[ib.as_ref().map_or(i, |m| m[i])];
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => {
                    if self.strict && y == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    x / y
                }
                BinKind::Maximum => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            });
        }
        let t = Tensor::new(&out_shape, out).unwrap_or_else(|_| Tensor::scalar(0.0));
        let t = if out_shape.is_empty() { Tensor::scalar(t.data[0]) } else { t };
        Ok(self.push(t, Op::Binary { kind, a, b, ia, ib }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Maximum, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: Var, extra: f64) -> Result<Var> {
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.len());
        for &v in &src.data {
            data.push(match kind {
                UnKind::Neg => -v,
                UnKind::Log => {
                    if v <= 0.0 || v.is_nan() {
                        return Err(Error::Domain(format!("log of non-positive value {v}")));
                    }
                    v.ln()
                }
                UnKind::Exp => v.exp(),
                UnKind::Relu => v.max(0.0),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Clip(lo, hi) => v.clamp(lo, hi),
                UnKind::AddScalar => v + extra,
                UnKind::MulScalar(c) => v * c,
            });
        }
        let t = Tensor { shape: src.shape.clone(), data, grad: None, requires_grad: false };
        Ok(self.push(t, Op::Unary { kind, x }))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Neg, x, 0.0)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Log, x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Exp, x, 0.0)
    }

    /// ReLU with derivative 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Relu, x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, x, 0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where `lo <= x <= hi`.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid!("clip bounds reversed: [{lo}, {hi}]"));
        }
        self.unary(UnKind::Clip(lo, hi), x, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnKind::AddScalar, x, c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnKind::MulScalar(c), x, 0.0)
    }

    // ----- reductions --------------------------------------------------

    fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(invalid!("axis {a} out of range for shape {shape:?}"));
            }
            if reduced[a] {
                return Err(invalid!("axis {a} listed twice"));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect()
        };
        let n_out: usize = kept.iter().product();
        let count = shape.iter().product::<usize>() / n_out;

        // map[i] = output slot of input flat index i
        let n_in: usize = shape.iter().product();
        let mut out_strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for d in (0..shape.len()).rev() {
            out_strides[d] = if reduced[d] { 0 } else { acc };
            acc *= kept[d];
        }
        let mut map = Vec::with_capacity(n_in);
        let mut idx = vec![0usize; shape.len()];
        let mut flat = 0usize;
        for _ in 0..n_in {
            map.push(flat);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                flat += out_strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                flat -= out_strides[d] * idx[d];
                idx[d] = 0;
            }
        }

        let src = self.data(x);
        let mut out = vec![0.0; n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += src[i];
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            ReduceKind::Max => {
                argmax = vec![usize::MAX; n_out];
                for (i, &o) in map.iter().enumerate() {
                    // strict comparison keeps the lowest flat index on ties
                    if argmax[o] == usize::MAX || src[i] > out[o] {
                        out[o] = src[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let t = if out_shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::new(&out_shape, out)?
        };
        Ok(self.push(t, Op::Reduce { kind, x, map, count, argmax }))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keepdim)
    }

    /// Maximum over `axes`; the gradient goes to the lowest-index argmax.
    pub fn max(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axes, keepdim)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    // ----- structural --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul needs [m,k]x[k,n], got {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let row = &db[p * n..(p + 1) * n];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err!("concat along {axis}: {s:?} vs {base:?}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let s = self.shape(*p);
                let block = s[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(invalid!("slice {start}..{end} on axis {axis} of {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Pads `axis` by repeating its first/last entries.
    pub fn pad_replicate(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid!("pad axis {axis} out of range for {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let new_dim = dim + before + after;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * new_dim * inner);
        for o in 0..outer {
            for j in 0..new_dim {
                let s = j.saturating_sub(before).min(dim - 1);
                let base = (o * dim + s) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = new_dim;
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::PadReplicate { x, axis, before }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).value_only().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates d`root`/d`leaf` into every gradient-tracking leaf.
    ///
    /// Gradients add up across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Runs `f` on the gradient buffer of `v` if `v` tracks gradients.
        let mut upd = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.needs_grad {
                return;
            }
            let mut buf = grads[v.0].take().unwrap_or_else(|| vec![0.0; target.value.len()]);
            f(&mut buf);
            grads[v.0] = Some(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let (va, vb) = (self.data(*a), self.data(*b));
                let ja = |k: usize| ia.as_ref().map_or(k, |m| m[k]);
                let jb = |k: usize| ib.as_ref().map_or(k, |m| m[k]);
                upd(*a, &mut |ga| {
                    for (k, &d) in gout.iter().enumerate() {
                        let (x, y) = (va[ja(k)], vb[jb(k)]);
                        ga[ja(k)] += d * match kind {
                            BinKind::Add | BinKind::Sub => 1.0,
                            BinKind::Mul => y,
                            BinKind::Div => 1.0 / y,
                            BinKind::Maximum => (x >= y) as u8 as f64,
                        };
                    }
                });
                upd(*b, &mut |gb| {
                    for (k, &d) in gout.iter().enumerate() {
                        let (x, y) = (va[ja(k)], vb[jb(k)]);
                        gb[jb(k)] += d * match kind {
                            BinKind::Add => 1.0,
                            BinKind::Sub => -1.0,
                            BinKind::Mul => x,
                            BinKind::Div => -x / (y * y),
                            BinKind::Maximum => (x < y) as u8 as f64,
                        };
                    }
                });
            }
            Op::Unary { kind, x } => {
                let (xin, yout) = (self.data(*x), &node.value.data);
                upd(*x, &mut |gx| {
                    for k in 0..gout.len() {
                        let v = xin[k];
                        gx[k] += gout[k]
                            * match kind {
                                UnKind::Neg => -1.0,
                                UnKind::Log => 1.0 / v,
                                UnKind::Exp => yout[k],
                                UnKind::Relu => (v > 0.0) as u8 as f64,
                                UnKind::Sigmoid => yout[k] * (1.0 - yout[k]),
                                UnKind::Clip(lo, hi) => (v >= *lo && v <= *hi) as u8 as f64,
                                UnKind::AddScalar => 1.0,
                                UnKind::MulScalar(c) => *c,
                            };
                    }
                });
            }
            Op::Reduce { kind, x, map, count, argmax } => upd(*x, &mut |gx| match kind {
                ReduceKind::Sum => map.iter().enumerate().for_each(|(k, &o)| gx[k] += gout[o]),
                ReduceKind::Mean => {
                    let s = 1.0 / *count as f64;
                    map.iter().enumerate().for_each(|(k, &o)| gx[k] += gout[o] * s)
                }
                ReduceKind::Max => argmax.iter().enumerate().for_each(|(o, &k)| gx[k] += gout[o]),
            }),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.data(*a), self.data(*b));
                upd(*a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let s: f64 = (0..n).map(|c| gout[r * n + c] * vb[p * n + c]).sum();
                            ga[r * k + p] += s;
                        }
                    }
                });
                upd(*b, &mut |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = va[r * k + p];
                            for c in 0..n {
                                gb[p * n + c] += av * gout[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.value.shape, *axis);
                let total = node.value.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.shape(*p)[*axis] * inner;
                    upd(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + block];
                            gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, s)| *g += s);
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape[*axis];
                upd(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner].iter_mut().zip(src).for_each(|(g, s)| *g += s);
                    }
                });
            }
            Op::PadReplicate { x, axis, before } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let new_dim = node.value.shape[*axis];
                upd(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..new_dim {
                            let s = j.saturating_sub(*before).min(dim - 1);
                            let dst = (o * dim + s) * inner;
                            let src = (o * new_dim + j) * inner;
                            for t in 0..inner {
                                gx[dst + t] += gout[src + t];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => upd(*x, &mut |gx| gx.iter_mut().zip(gout).for_each(|(g, s)| *g += s)),
            Op::Conv2d { x, w, b, geom } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                upd(*x, &mut |gx| kernels::conv2d_grad_input(self.exec, gout, self.data(*w), xs, ws, geom, gx));
                upd(*w, &mut |gw| kernels::conv2d_grad_weight(self.exec, gout, self.data(*x), xs, ws, geom, gw));
                if let Some(b) = b {
                    upd(*b, &mut |gb| kernels::bias_grad(gout, &node.value.shape, gb));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                upd(*x, &mut |gx| kernels::conv_t_grad_input(self.exec, gout, self.data(*w), xs, ws, *stride, gx));
                upd(*w, &mut |gw| kernels::conv_t_grad_weight(self.exec, gout, self.data(*x), xs, ws, *stride, gw));
                if let Some(b) = b {
                    upd(*b, &mut |gb| kernels::bias_grad(gout, &node.value.shape, gb));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*x);
                let gamma_v = self.data(*gamma);
                upd(*x, &mut |gx| kernels::bn_grad_input(gout, xhat, inv_std, gamma_v, shape, *train, gx));
                upd(*gamma, &mut |gg| kernels::bn_grad_gamma(gout, xhat, shape, gg));
                upd(*beta, &mut |gb| kernels::bias_grad(gout, shape, gb));
            }
            Op::AvgPool2 { x } => upd(*x, &mut |gx| kernels::avg_pool2_grad(gout, self.shape(*x), gx)),
        }
    }
}

/// Central-difference gradient of a scalar function.
///
/// Entry `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.value_only();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    if x.shape.is_empty() {
        return Ok(Tensor::scalar(out[0]));
    }
    Tensor::new(&x.shape, out)
}

/// `|a − n| <= atol + rtol·|n|` for every pair.
pub fn allclose(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic
            .iter()
            .zip(numeric)
            .all(|(a, n)| (a - n).abs() <= atol + rtol * n.abs())
}
