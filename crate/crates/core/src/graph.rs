//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation evaluates eagerly and appends a node to the [`Graph`]. Nodes are
//! stored in creation order, which is already a topological order, so the backward
//! sweep is a single reverse pass. Only first derivatives are supported.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
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
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    MinConst(Var, f64),
    ScaleRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not require
    /// gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Per-feature statistics of one batch-norm forward in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divisor n) batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (parameters, or inputs under inspection).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a `(1, cols)` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        let b = bv.data();
        for r in 0..value.rows() {
            for (o, bj) in value.row_mut(r).iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    /// Square root; the derivative at 0 is taken to be 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0).sqrt());
        let rg = self.rg(x);
        self.push(value, Op::Sqrt(x), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    /// `min(x, cap)` elementwise. An infinite cap is the identity.
    pub fn min_const(&mut self, x: Var, cap: f64) -> Var {
        let value = self.value(x).map(|v| v.min(cap));
        let rg = self.rg(x);
        self.push(value, Op::MinConst(x, cap), rg)
    }

    /// Multiplies row `i` of `x` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(Error::Shape(format!(
                "{} row factors for {} rows",
                factors.len(),
                xv.rows()
            )));
        }
        let mut value = xv.clone();
        for (r, f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ScaleRows(x, factors), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::hstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                xv.rows()
            )));
        }
        let value = xv.slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    /// Sum over columns, giving a `(rows, 1)` tensor.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(xv.rows(), 1, data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::RowSum(x), rg)
    }

    /// Euclidean norm of every row, `(rows, 1)`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let s = self.row_sum(sq);
        Ok(self.sqrt(s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let value = Tensor::scalar(xv.sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Batch normalization with batch statistics (train mode). Returns the output
    /// and the statistics used, so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if n == 0 {
            return Err(Error::Shape("batch norm on an empty batch".into()));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batch_norm_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count: n,
            },
        ))
    }

    /// Batch normalization with fixed statistics (eval mode): an affine map per feature.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = xv.shape();
        if gv.shape() != (1, c) || bv.shape() != (1, c) || mean.len() != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} features with gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut xhat = vec![0.0; n * c];
        let mut out = Tensor::zeros(n, c);
        let (g, b) = (gv.data(), bv.data());
        for r in 0..n {
            let xr = xv.row(r);
            let hr = &mut xhat[r * c..(r + 1) * c];
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[j] * hr[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node. Gradients are returned for every node that
    /// requires them and that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        if let Some(bad) = grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of shape {:?}",
                bad.shape()
            )));
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized"));
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        dy: &Tensor,
        f: impl Fn(usize, f64) -> f64,
    ) {
        self.accumulate(grads, x, |g| {
            for (i, (gi, d)) in g.data_mut().iter_mut().zip(dy.data()).enumerate() {
                *gi += f(i, *d);
            }
        });
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA += dY·Bᵀ, dB += Aᵀ·dY
                self.accumulate(grads, *a, |g| {
                    gemm(m, n, k, 1.0, dy.data(), false, bv.data(), true, 1.0, g.data_mut())
                });
                self.accumulate(grads, *b, |g| {
                    gemm(k, m, n, 1.0, av.data(), true, dy.data(), false, 1.0, g.data_mut())
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |g| g.add_assign(dy));
                self.accumulate(grads, *b, |g| {
                    let gd = g.data_mut();
                    for r in 0..dy.rows() {
                        for (gj, d) in gd.iter_mut().zip(dy.row(r)) {
                            *gj += d;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| g.add_assign(dy));
                self.accumulate(grads, *b, |g| g.add_assign(dy));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| g.add_assign(dy));
                self.elementwise(grads, *b, dy, |_, d| -d);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, dy, |i, d| d * bv[i]);
                self.elementwise(grads, *b, dy, |i, d| d * av[i]);
            }
            Op::Affine(x, s) => self.elementwise(grads, *x, dy, |_, d| d * s),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, dy, |i, d| if xv[i] > 0.0 { d } else { 0.0 });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, dy, |i, d| {
                    if xv[i] > 0.0 {
                        d
                    } else {
                        d * slope
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.elementwise(grads, *x, dy, |i, d| d * yv[i] * (1.0 - yv[i]));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, dy, |i, d| d / xv[i]);
            }
            Op::Sqrt(x) => {
                let yv = node.value.data();
                self.elementwise(grads, *x, dy, |i, d| {
                    if yv[i] > 0.0 {
                        0.5 * d / yv[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, dy, |i, d| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        d
                    } else {
                        0.0
                    }
                });
            }
            Op::MinConst(x, cap) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, dy, |i, d| if xv[i] <= *cap { d } else { 0.0 });
            }
            Op::ScaleRows(x, factors) => {
                let cols = dy.cols();
                self.elementwise(grads, *x, dy, |i, d| d * factors[i / cols]);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |g| {
                        for r in 0..dy.rows() {
                            let src = &dy.row(r)[offset..offset + w];
                            for (gj, d) in g.row_mut(r).iter_mut().zip(src) {
                                *gj += d;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                self.accumulate(grads, *x, |g| {
                    for r in 0..dy.rows() {
                        for (gj, d) in g.row_mut(start + r).iter_mut().zip(dy.row(r)) {
                            *gj += d;
                        }
                    }
                });
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).cols();
                let d = dy.data();
                self.accumulate(grads, *x, |g| {
                    for (i, gi) in g.data_mut().iter_mut().enumerate() {
                        *gi += d[i / cols];
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy.data()[0];
                self.accumulate(grads, *x, |g| g.data_mut().iter_mut().for_each(|v| *v += d));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let d = dy.data()[0] / n;
                self.accumulate(grads, *x, |g| g.data_mut().iter_mut().for_each(|v| *v += d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = dy.shape();
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..n {
                    let hr = &xhat[r * c..(r + 1) * c];
                    for (j, d) in dy.row(r).iter().enumerate() {
                        sum_dy[j] += d;
                        sum_dy_xhat[j] += d * hr[j];
                    }
                }
                self.accumulate(grads, *beta, |gb| gb.add_assign(&row_tensor(&sum_dy)));
                self.accumulate(grads, *gamma, |gg| gg.add_assign(&row_tensor(&sum_dy_xhat)));
                self.accumulate(grads, *x, |gx| {
                    let nf = n as f64;
                    for r in 0..n {
                        let hr = &xhat[r * c..(r + 1) * c];
                        let dr = dy.row(r);
                        for (j, gj) in gx.row_mut(r).iter_mut().enumerate() {
                            let scale = g[j] * inv_std[j];
                            *gj += if *batch_stats {
                                scale * (dr[j] - sum_dy[j] / nf - hr[j] * sum_dy_xhat[j] / nf)
                            } else {
                                scale * dr[j]
                            };
                        }
                    }
                });
            }
        }
    }
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(1, v.len(), v.to_vec()).expect("row")
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
