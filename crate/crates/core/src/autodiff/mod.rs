//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse. Gradients accumulate
//! additively when a node feeds several consumers. Every op checks its output
//! for NaN/Inf and fails instead of propagating non-finite values.
//!
//! Stochastic computations never sample inside the graph: callers draw noise
//! up front and pass it in as constant tensors, so the backward pass is exact
//! for the sampled path and a forward pass can be replayed bit-for-bit.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::{ConvGeom, Padding, PoolGeom};

use kernels::{conv2d_grad_filters, conv2d_grad_input, conv2d_raw, gemm, maxpool_raw, sigmoid, softmax_in_place, softplus};

/// Batchnorm variance stabilizer.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Swish(Var, Vec<f64>),
    Softmax(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    BroadcastRows(Var),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    ConcatLast(Var, Var),
    ScaleChannels(Var, Vec<f64>),
    Conv2d {
        input: Var,
        filters: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    KlDiag {
        mean: Var,
        rho: Var,
        prior_mean: Vec<f64>,
        prior_sigma: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned vector; zeros when the loss does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: op_name, index });
        }
        let requires_grad = parents.iter().any(|p| self.needs(*p));
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable (or differentiated-against) input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: "leaf", index });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_mismatch("add_const", self.shape(x), c.shape()));
        }
        let data = self.data(x).iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push("add_const", value, Op::AddConst(x), &[x])
    }

    /// `x ⊙ c` for a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_mismatch("mul_const", self.shape(x), c.shape()));
        }
        let data = self.data(x).iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst(x, c.data().to_vec()), &[x])
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * a, Op::Scale(x, a))
    }

    pub fn shift(&mut self, x: Var, a: f64) -> Result<Var> {
        self.unary("shift", x, |v| v + a, Op::Shift(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let sig: Vec<f64> = self.data(x).iter().map(|v| sigmoid(*v)).collect();
        let data = self.data(x).iter().zip(&sig).map(|(v, s)| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push("swish", value, Op::Swish(x, sig), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let n = value.last_dim();
        if n == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        for row in value.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 {
            return Err(Error::shape("matmul", "lhs rank", 2, sa.len()));
        }
        if sb.len() != 2 {
            return Err(Error::shape("matmul", "rhs rank", 2, sb.len()));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", "inner dimension", sa[1], sb[0]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::invalid("matmul: empty operand"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::shape("add_bias", "bias length", n, self.value(bias).len()));
        }
        let b = self.data(bias).to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Repeats a `[n]` vector into `[rows, n]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        if self.shape(v).len() != 1 {
            return Err(Error::shape("broadcast_rows", "input rank", 1, self.shape(v).len()));
        }
        let src = self.data(v);
        let n = src.len();
        let data = src.iter().copied().cycle().take(rows * n).collect();
        let value = Tensor::new(vec![rows, n], data)?;
        self.push("broadcast_rows", value, Op::BroadcastRows(v), &[v])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::SumAll(x), &[x])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::invalid("sum_last on a scalar"));
        }
        let n = t.last_dim();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let data = t.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(shape, data)?;
        self.push("sum_last", value, Op::SumLast(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Concatenates two `[b, p]` and `[b, q]` matrices into `[b, p+q]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::invalid("concat_last expects two matrices"));
        }
        if sa[0] != sb[0] {
            return Err(Error::shape("concat_last", "rows", sa[0], sb[0]));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&self.data(a)[r * p..(r + 1) * p]);
            data.extend_from_slice(&self.data(b)[r * q..(r + 1) * q]);
        }
        let value = Tensor::new(vec![rows, p + q], data)?;
        self.push("concat_last", value, Op::ConcatLast(a, b), &[a, b])
    }

    /// Multiplies `x[b, .., c]` by a constant per-(example, channel) factor
    /// `factors[b, c]`.
    pub fn scale_channels(&mut self, x: Var, factors: &Tensor) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let fs = factors.shape();
        if fs.len() != 2 || xs.is_empty() {
            return Err(Error::invalid("scale_channels expects [batch, channels] factors"));
        }
        if fs[0] != xs[0] {
            return Err(Error::shape("scale_channels", "batch", xs[0], fs[0]));
        }
        let c = *xs.last().unwrap();
        if fs[1] != c {
            return Err(Error::shape("scale_channels", "channels", c, fs[1]));
        }
        let mut value = self.value(x).clone();
        let per_example = value.len() / xs[0];
        for (b, chunk) in value.data_mut().chunks_mut(per_example).enumerate() {
            let f = &factors.data()[b * c..(b + 1) * c];
            for px in chunk.chunks_mut(c) {
                for (v, s) in px.iter_mut().zip(f) {
                    *v *= s;
                }
            }
        }
        self.push("scale_channels", value, Op::ScaleChannels(x, factors.data().to_vec()), &[x])
    }

    /// 2-D cross-correlation of an NHWC batch with `[k,k,cin,cout]` filters.
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(filters), stride, padding)?;
        if let Some(index) = self.value(filters).first_non_finite() {
            return Err(Error::NonFinite { op: "conv2d", index });
        }
        let (out, cols) = conv2d_raw(self.data(input), self.data(filters), &geom);
        let value = Tensor::new(geom.output_shape(), out)?;
        self.push("conv2d", value, Op::Conv2d { input, filters, geom, cols }, &[input, filters])
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(input), window)?;
        let (out, argmax) = maxpool_raw(self.data(input), &geom);
        let value = Tensor::new(geom.output_shape(), out)?;
        self.push("maxpool2d", value, Op::MaxPool { input, argmax }, &[input])
    }

    /// Per-channel batch normalization over every axis but the last.
    ///
    /// In training mode the batch (leading axis) must hold at least two
    /// examples and the batch statistics are returned so the caller can update
    /// running averages.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid("batchnorm expects a batch of features"));
        }
        let c = *shape.last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::shape("batchnorm", name, c, self.value(v).len()));
            }
        }
        let x = self.data(input);
        let rows = x.len() / c;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if shape[0] < 2 {
                    return Err(Error::shape("batchnorm", "training batch size (minimum)", 2, shape[0]));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for row in x.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for row in x.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let stats = train.then(|| BatchStats { mean, var });
        let v = self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[input, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Closed-form `KL(N(mean, softplus(rho)^2) || N(prior_mean, prior_sigma^2))`
    /// summed over elements.
    pub fn kl_diag(&mut self, mean: Var, rho: Var, prior_mean: &[f64], prior_sigma: &[f64]) -> Result<Var> {
        let n = self.value(mean).len();
        self.same_shape("kl_diag", mean, rho)?;
        if prior_mean.len() != n || prior_sigma.len() != n {
            return Err(Error::shape("kl_diag", "prior length", n, prior_mean.len()));
        }
        if let Some(i) = prior_sigma.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("kl_diag: prior sigma at {i} must be positive")));
        }
        let kl = crate::variational::kl_diag_value(self.data(mean), self.data(rho), prior_mean, prior_sigma);
        self.push(
            "kl_diag",
            Tensor::scalar(kl),
            Op::KlDiag {
                mean,
                rho,
                prior_mean: prior_mean.to_vec(),
                prior_sigma: prior_sigma.to_vec(),
            },
            &[mean, rho],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_loss = self.value(loss).len();
        if n_loss != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, gy, 1.0));
                self.acc(grads, *b, |g| axpy(g, gy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |g| zip3(g, gy, bv, |d, o| d * o));
                self.acc(grads, *b, |g| zip3(g, gy, av, |d, o| d * o));
            }
            Op::Div(a, b) => {
                let bv = self.data(*b);
                self.acc(grads, *a, |g| zip3(g, gy, bv, |d, o| d / o));
                // d(a/b)/db = -(a/b)/b
                self.acc(grads, *b, |g| {
                    for ((gi, d), (yi, bi)) in g.iter_mut().zip(gy).zip(y.iter().zip(bv)) {
                        *gi -= d * yi / bi;
                    }
                });
            }
            Op::AddConst(x) | Op::Shift(x) | Op::Reshape(x) => self.acc(grads, *x, |g| axpy(g, gy, 1.0)),
            Op::MulConst(x, c) => self.acc(grads, *x, |g| zip3(g, gy, c, |d, o| d * o)),
            Op::Scale(x, a) => self.acc(grads, *x, |g| axpy(g, gy, *a)),
            Op::Square(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |g| zip3(g, gy, xv, |d, o| 2.0 * d * o));
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |g| zip3(g, gy, xv, |d, o| d / o));
            }
            Op::Exp(x) => self.acc(grads, *x, |g| zip3(g, gy, y, |d, o| d * o)),
            Op::Softplus(x) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |g| zip3(g, gy, xv, |d, o| d * sigmoid(o)));
            }
            Op::Swish(x, sig) => {
                let xv = self.data(*x);
                self.acc(grads, *x, |g| {
                    for ((gi, (d, o)), s) in g.iter_mut().zip(gy.iter().zip(xv)).zip(sig) {
                        *gi += d * (s + o * s * (1.0 - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                self.acc(grads, *x, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for ((gi, d), p) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += p * (d - dot);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = dY·Bᵀ, dB = Aᵀ·dY
                self.acc(grads, *a, |g| gemm(m, n, k, gy, false, bv, true, g, 1.0));
                self.acc(grads, *b, |g| gemm(k, m, n, av, true, gy, false, g, 1.0));
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, |g| axpy(g, gy, 1.0));
                let n = self.value(*bias).len();
                self.acc(grads, *bias, |g| {
                    for row in gy.chunks(n) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::BroadcastRows(v) => {
                let n = self.value(*v).len();
                self.acc(grads, *v, |g| {
                    for row in gy.chunks(n) {
                        axpy(g, row, 1.0);
                    }
                });
            }
            Op::SumAll(x) => {
                let d = gy[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                self.acc(grads, *x, |g| {
                    for (row, d) in g.chunks_mut(n).zip(gy) {
                        row.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let p = self.value(*a).last_dim();
                let q = self.value(*b).last_dim();
                self.acc(grads, *a, |g| {
                    for (gr, dr) in g.chunks_mut(p).zip(gy.chunks(p + q)) {
                        axpy(gr, &dr[..p], 1.0);
                    }
                });
                self.acc(grads, *b, |g| {
                    for (gr, dr) in g.chunks_mut(q).zip(gy.chunks(p + q)) {
                        axpy(gr, &dr[p..], 1.0);
                    }
                });
            }
            Op::ScaleChannels(x, factors) => {
                let xs = self.shape(*x);
                let c = *xs.last().unwrap();
                let per_example = gy.len() / xs[0];
                self.acc(grads, *x, |g| {
                    for (b, (gc, dc)) in g.chunks_mut(per_example).zip(gy.chunks(per_example)).enumerate() {
                        let f = &factors[b * c..(b + 1) * c];
                        for (gp, dp) in gc.chunks_mut(c).zip(dc.chunks(c)) {
                            for ((gi, d), s) in gp.iter_mut().zip(dp).zip(f) {
                                *gi += d * s;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { input, filters, geom, cols } => {
                let x = self.data(*input);
                self.acc(grads, *filters, |g| conv2d_grad_filters(x, cols.as_deref(), gy, geom, g));
                let w = self.data(*filters);
                self.acc(grads, *input, |g| conv2d_grad_input(w, gy, geom, g));
            }
            Op::MaxPool { input, argmax } => {
                self.acc(grads, *input, |g| {
                    for (d, &src) in gy.iter().zip(argmax) {
                        g[src] += d;
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = (gy.len() / c) as f64;
                let gam = self.data(*gamma);
                self.acc(grads, *gamma, |g| {
                    for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for dr in gy.chunks(c) {
                        axpy(g, dr, 1.0);
                    }
                });
                if self.needs(*input) {
                    if *train {
                        let mut sum_d = vec![0.0; c];
                        let mut sum_dh = vec![0.0; c];
                        for (dr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dh = dr[j] * gam[j];
                                sum_d[j] += dh;
                                sum_dh[j] += dh * hr[j];
                            }
                        }
                        self.acc(grads, *input, |g| {
                            for ((gr, dr), hr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)) {
                                for j in 0..c {
                                    let dh = dr[j] * gam[j];
                                    gr[j] += inv_std[j] / rows * (rows * dh - sum_d[j] - hr[j] * sum_dh[j]);
                                }
                            }
                        });
                    } else {
                        self.acc(grads, *input, |g| {
                            for (gr, dr) in g.chunks_mut(c).zip(gy.chunks(c)) {
                                for j in 0..c {
                                    gr[j] += dr[j] * gam[j] * inv_std[j];
                                }
                            }
                        });
                    }
                }
            }
            Op::KlDiag {
                mean,
                rho,
                prior_mean,
                prior_sigma,
            } => {
                let d = gy[0];
                let (mv, rv) = (self.data(*mean), self.data(*rho));
                self.acc(grads, *mean, |g| {
                    for i in 0..g.len() {
                        g[i] += d * (mv[i] - prior_mean[i]) / (prior_sigma[i] * prior_sigma[i]);
                    }
                });
                self.acc(grads, *rho, |g| {
                    for i in 0..g.len() {
                        let sq = softplus(rv[i]);
                        let ps2 = prior_sigma[i] * prior_sigma[i];
                        // -sigmoid/softplus + softplus·sigmoid/ps², with the first ratio -> 1 as rho -> -inf
                        let ratio = if rv[i] < -30.0 { 1.0 } else { sigmoid(rv[i]) / sq };
                        g[i] += d * (-ratio + sq * sigmoid(rv[i]) / ps2);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let len = self.value(v).len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    if a.len() != b.len() {
        return Error::shape(op, "rank", a.len(), b.len());
    }
    let axis = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
    Error::shape(op, format!("axis {axis}"), a[axis], b[axis])
}

fn axpy(g: &mut [f64], x: &[f64], a: f64) {
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi += a * xi;
    }
}

fn zip3(g: &mut [f64], d: &[f64], o: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((gi, di), oi) in g.iter_mut().zip(d).zip(o) {
        *gi += f(*di, *oi);
    }
}
