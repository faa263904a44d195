//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation reads
//! earlier nodes and pushes exactly one new node, so the arena order is a
//! topological order and backward is a single reverse sweep. Gradients are
//! accumulated additively into per-node buffers returned as [`Gradients`].
//!
//! Broadcasting is limited to the right-hand operand of a binary op, whose
//! shape must equal a trailing suffix of the left-hand shape.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::resample::BilinearPlan;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map `out[o] = Σ w · in[idx]`.
///
/// Gathers, flips and transposes are instances.
#[derive(Clone, Debug)]
pub struct SparseMap {
    out_shape: Vec<usize>,
    in_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds a map from per-output lists of `(input index, weight)`.
    pub fn from_rows(
        out_shape: Vec<usize>,
        in_len: usize,
        rows: impl IntoIterator<Item = Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (i, w) in row {
                if i >= in_len {
                    return Err(Error::Shape(format!("sparse index {i} out of bounds {in_len}")));
                }
                indices.push(i);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        if offsets.len() - 1 != numel(&out_shape) {
            return Err(Error::Shape(format!(
                "sparse map has {} rows for output shape {:?}",
                offsets.len() - 1,
                out_shape
            )));
        }
        Ok(Self { out_shape, in_len, offsets, indices, weights })
    }

    /// Pure gather: `out[o] = in[indices[o]]`.
    pub fn gather(out_shape: Vec<usize>, in_len: usize, idx: &[usize]) -> Result<Self> {
        if idx.len() != numel(&out_shape) {
            return Err(Error::Shape(format!(
                "{} gather indices for output shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= in_len) {
            return Err(Error::Shape(format!("gather index {bad} out of bounds {in_len}")));
        }
        Ok(Self {
            out_shape,
            in_len,
            offsets: (0..=idx.len()).collect(),
            indices: idx.to_vec(),
            weights: vec![1.0; idx.len()],
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .map(|o| {
                (self.offsets[o]..self.offsets[o + 1])
                    .map(|k| self.weights[k] * input[self.indices[k]])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for o in 0..self.offsets.len() - 1 {
            let g = grad_out[o];
            if g == 0.0 {
                continue;
            }
            for k in self.offsets[o]..self.offsets[o + 1] {
                grad_in[self.indices[k]] += self.weights[k] * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce { kind: ReduceKind, input: Var, route: Vec<usize>, count: usize },
    Reshape(Var),
    Sparse(Var, Rc<SparseMap>),
    Bilinear(Var, Rc<BilinearPlan>),
    ConcatLast(Var, Var),
    Matmul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams },
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation for one logical step. Not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when no gradient
    /// path reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Like [`Gradients::get`] but yields zeros for unreached nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(|g| g.is_some())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        let (h, w, ci) = match input[..] {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::Shape(format!("conv input must be [H,W,C], got {input:?}"))),
        };
        let (kh, kw, wci, co) = match weight[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::Shape(format!(
                    "conv weight must be [kh,kw,Cin,Cout], got {weight:?}"
                )))
            }
        };
        if wci != ci {
            return Err(Error::Shape(format!("conv expects {wci} input channels, got {ci}")));
        }
        if p.stride == 0 || h + 2 * p.padding < kh || w + 2 * p.padding < kw {
            return Err(Error::Shape("conv kernel larger than padded input".into()));
        }
        let ho = (h + 2 * p.padding - kh) / p.stride + 1;
        let wo = (w + 2 * p.padding - kw) / p.stride + 1;
        Ok(Self { h, w, ci, kh, kw, co, ho, wo, stride: p.stride, pad: p.padding })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.ho * self.wo * patch];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.ci;
                        let dst = (ky * self.kw + kx) * self.ci;
                        row[dst..dst + self.ci].copy_from_slice(&x[src..src + self.ci]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * patch..][..patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.ci;
                        let src = (ky * self.kw + kx) * self.ci;
                        for c in 0..self.ci {
                            gx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// For every input element, the flat index of the output element it reduces into.
fn reduce_route(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let keep: Vec<bool> = (0..shape.len()).map(|d| !axes.contains(&d)).collect();
    let out_shape: Vec<usize> =
        shape.iter().zip(&keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect();
    let n = numel(shape);
    let mut route = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for d in 0..shape.len() {
            if keep[d] {
                o = o * shape[d] + idx[d];
            }
        }
        route.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, route)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Number of leaves that carry gradients (trainable inputs).
    pub fn num_trainable_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && matches!(n.op, Op::Leaf)).count()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs record no backward rule.
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push(value, rg, op))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Same values as `v`, with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// True when `target` lies on a recorded gradient path ending at `root`.
    pub fn depends_on(&self, root: Var, target: Var) -> bool {
        if target.0 > root.0 {
            return false;
        }
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for i in (target.0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            if i == target.0 {
                return true;
            }
            for input in self.inputs_of(i) {
                live[input.0] = true;
            }
        }
        false
    }

    fn inputs_of(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::ConcatLast(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Sparse(a, _)
            | Op::Bilinear(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Normalize(a) => vec![*a],
            Op::Reduce { input, .. } => vec![*input],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
        }
    }

    // ---- elementwise ------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!(
                "{kind:?}: cannot broadcast {sb:?} onto {sa:?}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("binary", out, &[a, b], Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let f = |x: f64| match kind {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => stable_sigmoid(x),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Square => x * x,
        };
        let out = self.value(a).map(f);
        self.push_op("unary", out, &[a], Op::Unary(kind, a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push_op("scale", out, &[a], Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push_op("add_scalar", out, &[a], Op::AddScalar(a))
    }

    // ---- reductions -------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&d| d >= shape.len()) {
            return Err(Error::Shape(format!("axis {bad} invalid for shape {shape:?}")));
        }
        let count: usize = axes.iter().map(|&d| shape[d]).product();
        if count == 0 {
            return Err(Error::Shape(format!("empty reduction over axes {axes:?} of {shape:?}")));
        }
        let (out_shape, route) = reduce_route(&shape, axes);
        let n_out = numel(&out_shape);
        let x = self.value(a).data();
        let mut out = match kind {
            ReduceKind::Max => vec![f64::NEG_INFINITY; n_out],
            _ => vec![0.0; n_out],
        };
        // For Max the route is replaced by the winning input index per output.
        let mut arg = vec![usize::MAX; n_out];
        for (i, (&v, &o)) in x.iter().zip(&route).enumerate() {
            match kind {
                ReduceKind::Max => {
                    if v > out[o] || arg[o] == usize::MAX {
                        out[o] = v;
                        arg[o] = i;
                    }
                }
                _ => out[o] += v,
            }
        }
        if kind == ReduceKind::Mean {
            out.iter_mut().for_each(|v| *v /= count as f64);
        }
        let route = if kind == ReduceKind::Max { arg } else { route };
        let t = Tensor::new(out_shape, out)?;
        self.push_op("reduce", t, &[a], Op::Reduce { kind, input: a, route, count })
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push_op("reshape", out, &[a], Op::Reshape(a))
    }

    pub fn sparse(&mut self, a: Var, map: Rc<SparseMap>) -> Result<Var> {
        if map.in_len != self.value(a).len() {
            return Err(Error::Shape(format!(
                "sparse map expects {} inputs, got {}",
                map.in_len,
                self.value(a).len()
            )));
        }
        let data = map.apply(self.value(a).data());
        let out = Tensor::new(map.out_shape.clone(), data)?;
        self.push_op("sparse", out, &[a], Op::Sparse(a, map))
    }

    pub fn bilinear(&mut self, a: Var, plan: Rc<BilinearPlan>) -> Result<Var> {
        if self.shape(a) != plan.in_shape() {
            return Err(Error::Shape(format!(
                "bilinear plan expects {:?}, got {:?}",
                plan.in_shape(),
                self.shape(a)
            )));
        }
        let out = Tensor::new(plan.out_shape(), plan.apply(self.value(a).data()))?;
        self.push_op("bilinear", out, &[a], Op::Bilinear(a, plan))
    }

    pub fn gather(&mut self, a: Var, out_shape: Vec<usize>, idx: &[usize]) -> Result<Var> {
        let map = SparseMap::gather(out_shape, self.value(a).len(), idx)?;
        self.sparse(a, Rc::new(map))
    }

    /// Selects rows of a `[N, D]` tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = match self.shape(a)[..] {
            [n, d] => (n, d),
            ref s => return Err(Error::Shape(format!("select_rows expects [N, D], got {s:?}"))),
        };
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {r} out of bounds {n}")));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        self.gather(a, vec![rows.len(), d], &idx)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match self.shape(a)[..] {
            [m, n] => (m, n),
            ref s => return Err(Error::Shape(format!("transpose expects 2-D, got {s:?}"))),
        };
        let idx: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(a, vec![n, m], &idx)
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = numel(&sa[..sa.len() - 1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::new(shape, data)?;
        self.push_op("concat", out, &[a, b], Op::ConcatLast(a, b))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_op("matmul", t, &[a, b], Op::Matmul(a, b))
    }

    /// Zero-padded 2-D convolution over an `[H, W, Cin]` map with
    /// `[kh, kw, Cin, Cout]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        let g = ConvGeom::new(self.shape(input), self.shape(weight), params)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.co] {
                return Err(Error::Shape(format!(
                    "conv bias must be [{}], got {:?}",
                    g.co,
                    self.shape(b)
                )));
            }
        }
        let cols = g.im2col(self.value(input).data());
        let rows = g.ho * g.wo;
        let mut out = vec![0.0; rows * g.co];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * g.co..(r + 1) * g.co].copy_from_slice(bv);
            }
        }
        gemm_nn(&cols, self.value(weight).data(), &mut out, rows, g.patch(), g.co);
        let t = Tensor::new(vec![g.ho, g.wo, g.co], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push_op("conv2d", t, &inputs, Op::Conv2d { input, weight, bias, params })
    }

    // ---- normalizations ---------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = last_axis_map(self.value(a), |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        })?;
        self.push_op("softmax", out, &[a], Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = last_axis_map(self.value(a), |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        })?;
        self.push_op("log_softmax", out, &[a], Op::LogSoftmax(a))
    }

    /// L2-normalizes each vector along the last axis. All-zero vectors map to
    /// zero and pass no gradient.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let out = last_axis_map(self.value(a), |row, out| {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = x / n;
                }
            }
        })?;
        self.push_op("normalize", out, &[a], Op::Normalize(a))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rshape = self.shape(root);
        if numel(rshape) != 1 {
            return Err(Error::NonScalarRoot(rshape.to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            for input in self.inputs_of(i) {
                if input.0 >= i {
                    return Err(Error::Cycle { node: i, input: input.0 });
                }
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                acc(*a, grads, &mut |ga| {
                    for (k, gk) in ga.iter_mut().enumerate() {
                        *gk += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[k],
                            BinaryKind::Mul => g[k] * bv[k % nb],
                            BinaryKind::Div => g[k] / bv[k % nb],
                        };
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[k % nb] += match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * av[k],
                            BinaryKind::Div => -gk * av[k] / (bv[k % nb] * bv[k % nb]),
                        };
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                acc(*a, grads, &mut |ga| {
                    for k in 0..ga.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[k],
                            UnaryKind::Log => 1.0 / x[k],
                            UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                            UnaryKind::Softplus => stable_sigmoid(x[k]),
                            UnaryKind::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x[k],
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, grads, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, &gk)| *x += s * gk)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, grads, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &gk)| *x += gk))
            }
            Op::Reduce { kind, input, route, count } => acc(*input, grads, &mut |ga| match kind {
                ReduceKind::Sum => ga.iter_mut().zip(route).for_each(|(x, &o)| *x += g[o]),
                ReduceKind::Mean => {
                    let s = 1.0 / *count as f64;
                    ga.iter_mut().zip(route).for_each(|(x, &o)| *x += g[o] * s)
                }
                ReduceKind::Max => {
                    for (o, &src) in route.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }),
            Op::Sparse(a, map) => acc(*a, grads, &mut |ga| map.apply_transpose(g, ga)),
            Op::Bilinear(a, plan) => acc(*a, grads, &mut |ga| plan.apply_transpose(g, ga)),
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = self.value(*a).len() / ca;
                acc(*a, grads, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for r in 0..rows {
                        for c in 0..cb {
                            gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, grads, &mut |ga| gemm_nt(g, bv, ga, m, k, n));
                acc(*b, grads, &mut |gb| gemm_tn(av, g, gb, m, k, n));
            }
            Op::Conv2d { input, weight, bias, params } => {
                let geo = ConvGeom::new(self.shape(*input), self.shape(*weight), *params)
                    .expect("validated in forward");
                let rows = geo.ho * geo.wo;
                let patch = geo.patch();
                if let Some(b) = bias {
                    acc(*b, grads, &mut |gb| {
                        for r in 0..rows {
                            for c in 0..geo.co {
                                gb[c] += g[r * geo.co + c];
                            }
                        }
                    });
                }
                let cols = geo.im2col(self.value(*input).data());
                acc(*weight, grads, &mut |gw| gemm_tn(&cols, g, gw, rows, patch, geo.co));
                let wv = self.value(*weight).data();
                acc(*input, grads, &mut |gx| {
                    let mut gcols = vec![0.0; rows * patch];
                    gemm_nt(g, wv, &mut gcols, rows, patch, geo.co);
                    geo.col2im(&gcols, gx);
                });
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, grads, &mut |ga| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            ga[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = *node.value.shape().last().unwrap();
                acc(*a, grads, &mut |ga| {
                    for r in 0..y.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: f64 = gr.iter().sum();
                        for c in 0..d {
                            ga[r * d + c] += gr[c] - y[r * d + c].exp() * gs;
                        }
                    }
                });
            }
            Op::Normalize(a) => {
                let d = *node.value.shape().last().unwrap();
                let x = self.value(*a).data();
                acc(*a, grads, &mut |ga| {
                    for r in 0..y.len() / d {
                        let xr = &x[r * d..(r + 1) * d];
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            ga[r * d + c] += (gr[c] - yr[c] * dot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn last_axis_map(t: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let d = *t.shape().last().ok_or_else(|| Error::Shape("rank-0 input".into()))?;
    if d == 0 {
        return Err(Error::Shape("empty last axis".into()));
    }
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        f(row, o);
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let ones = tape.constant(Tensor::ones(&[2]));
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(a).data());

        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_only_trailing() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let ok = tape.constant(Tensor::ones(&[3]));
        let bad = tape.constant(Tensor::ones(&[2]));
        assert!(tape.add(a, ok).is_ok());
        assert!(matches!(tape.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        let m = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let gap = tape.mean(m, &[0, 1]).unwrap();
        assert_eq!(tape.value(gap).item(), 4.0);

        let c = tape.constant(Tensor::full(&[3, 4, 2], 2.5));
        let cm = tape.mean(c, &[0, 1]).unwrap();
        assert_eq!(tape.value(cm).data(), &[2.5, 2.5]);

        let mx = tape.max(m, &[1]).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 7.0]);
    }

    #[test]
    fn empty_reduction_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(tape.sum(x, &[0]).is_err());
        let y = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.sum(y, &[3]).is_err());
    }

    #[test]
    fn backward_simple_polynomials() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);

        let sq = tape.square(x).unwrap();
        let s2 = tape.sum_all(sq).unwrap();
        let g = tape.backward(s2).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn reuse_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap(); // 2x²
        let s = tape.sum_all(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[12.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.5, -2.0]));
        let d = tape.detach(x);
        assert_eq!(tape.value(d), tape.value(x));
        let sq = tape.square(d).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(!g.reached(x));
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_product_reaches_only_live_side() {
        let mut tape = Tape::new();
        let m_src = tape.param(t(&[2], &[0.3, 0.7]));
        let s_src = tape.param(t(&[2], &[1.0, 2.0]));
        let m = tape.detach(m_src);
        let p = tape.mul(s_src, m).unwrap();
        let l = tape.sum_all(p).unwrap();
        assert!(tape.depends_on(l, s_src));
        assert!(!tape.depends_on(l, m_src));
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(s_src).data(), &[0.3, 0.7]);
        assert!(!g.reached(m_src));
    }

    #[test]
    fn constant_graph_has_no_backward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        let s = tape.sum_all(x).unwrap();
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(!g.reached(x));
    }

    #[test]
    fn matmul_and_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let at = tape.transpose(a).unwrap();
        assert_eq!(tape.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let p = tape.matmul(a, at).unwrap();
        assert_eq!(tape.value(p).data(), &[14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        w.data_mut()[4] = 1.0;
        let w = tape.constant(w);
        let y = tape.conv2d(x, w, None, Conv2dParams { stride: 1, padding: 1 }).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 500.0]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.wrt(x).data()[2..], &[0.0, 0.0]);
    }
}
