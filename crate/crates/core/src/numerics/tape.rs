//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a reverse topological order.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Additive value used for masked logits before softmax.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    LogSoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Softplus(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "add")?;
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (m, n) = x.dims2();
        if r.len() != n {
            return Err(shape_err(
                "add_row",
                format!("[{m}x{n}] + row of length {}", r.len()),
            ));
        }
        let mut out = x.clone();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Per-row layer normalization with learned scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("width {n} vs scale {} / offset {}", g.len(), b.len()),
            ));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row softmax of `x + mask` where `visible` is the row-major T×T
    /// visibility pattern. Masked outputs are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, visible: &Arc<[bool]>) -> Result<Var> {
        let out = masked_row_softmax(self.value(x), visible)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(vec![m, n], out).expect("shape preserved");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        if start + width > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns [{start}, {}) of width {n}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&x.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![m, width], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            m += v.rows();
            out.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Stacks the given rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, n) = t.dims2();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Vector of elements `a[i][j]` for each `(i, j)`.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= m || j >= n {
                return Err(shape_err("pick", format!("({i}, {j}) in [{m}x{n}]")));
            }
            out.push(x.get(i, j));
        }
        let out = Tensor::new(vec![at.len()], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Pick(a, at.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// `ln(1 + eˣ)`, elementwise.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(shape_err(
                "backward",
                format!("seed must be scalar, got shape {:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv).expect("shapes checked forward"));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.t_matmul(g).expect("shapes checked forward"));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(bv).expect("shapes checked forward"));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.t_matmul(av).expect("shapes checked forward"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reshape_like(g, self.value(*a)));
                self.accumulate(grads, *b, reshape_like(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reshape_like(g, self.value(*a)));
                self.accumulate(grads, *b, reshape_like(&g.map(|v| -v), self.value(*b)));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let rv = self.value(*row);
                    let (m, n) = g.dims2();
                    let mut col = vec![0.0; n];
                    for i in 0..m {
                        for (c, v) in col.iter_mut().zip(g.row(i)) {
                            *c += v;
                        }
                    }
                    let t = Tensor::new(rv.shape().to_vec(), col).expect("row length checked");
                    self.accumulate(grads, *row, t);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * gelu(xv).1).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = g.dims2();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.row(i);
                        let hi = &xhat[i * n..(i + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gi[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hi[j];
                        }
                        let k = inv_std[i] / n as f64;
                        for j in 0..n {
                            let dh = gi[j] * gam[j];
                            dx[i * n + j] = k * (n as f64 * dh - s1 - hi[j] * s2);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(xs, dx).unwrap());
                }
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.row(i);
                        for j in 0..n {
                            dg[j] += gi[j] * xhat[i * n + j];
                            db[j] += gi[j];
                        }
                    }
                    let gs = self.value(*gamma).shape().to_vec();
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *beta, Tensor::new(bs, db).unwrap());
                }
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let s: f64 = yi.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dx[i * n + j] = yi[j] * (gi[j] - s);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yi = y.row(i);
                    let gi = g.row(i);
                    let s: f64 = gi.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = gi[j] - yi[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let (m, n) = x.dims2();
                let w = g.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        let s = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::new(s, d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        let s = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::new(s, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let n = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in dt.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Pick(a, at) => {
                let x = self.value(*a);
                let n = x.cols();
                let mut dx = Tensor::zeros(x.shape());
                for (t, &(i, j)) in at.iter().enumerate() {
                    dx.data_mut()[i * n + j] += g.data()[t];
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.item()));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d).unwrap());
            }
        }
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("same element count")
}

/// Row softmax of `logits + mask`, where masked entries get [`MASK_SENTINEL`]
/// before normalization and are forced to exactly zero afterwards.
///
/// Panics if some row has no visible entry.
pub fn masked_row_softmax(logits: &Tensor, visible: &[bool]) -> Result<Tensor> {
    let (m, n) = logits.dims2();
    if visible.len() != m * n {
        return Err(shape_err(
            "masked_row_softmax",
            format!("logits [{m}x{n}] with mask of {} entries", visible.len()),
        ));
    }
    let mut out = vec![0.0; m * n];
    let mut shifted = vec![0.0; n];
    for i in 0..m {
        let row = logits.row(i);
        let vis = &visible[i * n..(i + 1) * n];
        assert!(vis.iter().any(|&v| v), "row {i} of attention mask is fully masked");
        for j in 0..n {
            shifted[j] = row[j] + if vis[j] { 0.0 } else { MASK_SENTINEL };
        }
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * n..(i + 1) * n];
        let mut z = 0.0;
        for j in 0..n {
            if vis[j] {
                let e = (shifted[j] - max).exp();
                o[j] = e;
                z += e;
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// GELU value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
