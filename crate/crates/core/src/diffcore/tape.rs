use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::linalg::{self, MatRef};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Softplus,
    Relu,
    /// Softmax over every entry of the flattened tensor.
    SoftmaxOverAll,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias { x: Var, bias: Var },
    Activation(Var, Activation),
    /// Softplus with its derivative (the logistic sigmoid) kept from the forward pass.
    Softplus { x: Var, slope: Vec<f64> },
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumLast { x: Var, last: usize },
    Reshape(Var),
    ConvStride(ConvStrideCtx),
    Conv(ConvCtx),
    Nuclear { x: Var, cols: usize, vectors: Vec<f64>, inv_sqrt: Vec<f64> },
}

#[derive(Debug)]
struct ConvStrideCtx {
    input: Var,
    kernel: Var,
    stride: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct ConvCtx {
    input: Var,
    weight: Var,
    bias: Var,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reflect an index into `0..n` without repeating the edge sample
/// (`-1 → 1`, `n → n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Fills `out` (`h·w × c`) with the input sample that kernel tap `tap`
/// (row-major in `k × k`) sees at every output pixel, reflect-padded.
fn shift_reflect(x: &[f64], h: usize, w: usize, c: usize, k: usize, tap: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    let (u, v) = ((tap / k) as isize - r, (tap % k) as isize - r);
    let cols: Vec<usize> = (0..w).map(|j| reflect_index(j as isize + v, w)).collect();
    for i in 0..h {
        let row = reflect_index(i as isize + u, h);
        for (j, &col) in cols.iter().enumerate() {
            let src = (row * w + col) * c;
            out[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&x[src..src + c]);
        }
    }
}

/// Adjoint of [`shift_reflect`]: scatters `g` back onto the source samples.
fn unshift_reflect_add(g: &[f64], h: usize, w: usize, c: usize, k: usize, tap: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    let (u, v) = ((tap / k) as isize - r, (tap % k) as isize - r);
    let cols: Vec<usize> = (0..w).map(|j| reflect_index(j as isize + v, w)).collect();
    for i in 0..h {
        let row = reflect_index(i as isize + u, h);
        for (j, &col) in cols.iter().enumerate() {
            let dst = (row * w + col) * c;
            for (d, s) in out[dst..dst + c].iter_mut().zip(&g[(i * w + j) * c..(i * w + j + 1) * c]) {
                *d += s;
            }
        }
    }
}

/// Record of executed operations; replaying it backwards yields gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    /// Gradient for `var`, panicking when `var` is not a differentiable leaf.
    pub fn of(&self, var: Var) -> &Tensor {
        self.leaves.get(&var).expect("variable is not a differentiable leaf")
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.leaves.remove(&var)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = linalg::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{} of {:?} and {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.elementwise(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), math::abs)
    }

    /// Adds `bias` to every row of `x`; the bias length must equal `x`'s last extent.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).len() != last {
            return Err(dim_err!("bias of length {} against rows of {}", self.value(bias).len(), last));
        }
        let b = self.data(bias);
        let data = self.data(x).chunks(last).flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Softplus => {
                let src = self.data(x);
                let mut data = Vec::with_capacity(src.len());
                let mut slope = Vec::with_capacity(src.len());
                for &v in src {
                    let (y, d) = math::softplus_with_slope(v);
                    data.push(y);
                    slope.push(d);
                }
                let shape = self.shape(x).to_vec();
                let rg = self.rg(x);
                self.push(Tensor::new(shape, data).expect("shape preserved"), Op::Softplus { x, slope }, rg)
            }
            Activation::Relu => self.unary(x, Op::Activation(x, kind), |v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => self.unary(x, Op::Activation(x, kind), math::sigmoid),
            Activation::SoftmaxOverAll => {
                let src = self.data(x);
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut data: Vec<f64> = src.iter().map(|&v| math::exp(v - max)).collect();
                let total: f64 = data.iter().sum();
                for v in data.iter_mut() {
                    *v /= total;
                }
                let shape = self.shape(x).to_vec();
                let rg = self.rg(x);
                self.push(Tensor::new(shape, data).expect("shape preserved"), Op::Activation(x, kind), rg)
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x), rg)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let last = *shape.last().unwrap_or(&1);
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let data = self.data(x).chunks(last).map(|row| row.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, data).expect("reduced shape"), Op::SumLast { x, last }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Correlates every channel of an `h × w × c` input with one shared
    /// `k × k` kernel, reflect-padding `(k-1)/2` samples per side, and keeps
    /// every `stride`-th output. Output extents are `⌈h/stride⌉ × ⌈w/stride⌉`.
    pub fn conv2d_stride(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        if si.len() != 3 {
            return Err(dim_err!("conv2d_stride input must be h×w×c, got {:?}", si));
        }
        if sk.len() != 2 || sk[0] != sk[1] {
            return Err(dim_err!("conv2d_stride kernel must be square k×k, got {:?}", sk));
        }
        let k = sk[0];
        if k % 2 == 0 {
            return Err(Error::Config(alloc::format!("kernel size {} must be odd", k)));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let (h, w, c) = (si[0], si[1], si[2]);
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let r = (k / 2) as isize;
        let x = self.data(input);
        let kv = self.data(kernel);
        let mut out = vec![0.0; oh * ow * c];
        for oi in 0..oh {
            for oj in 0..ow {
                let dst = &mut out[(oi * ow + oj) * c..(oi * ow + oj + 1) * c];
                for u in 0..k {
                    let row = reflect_index((oi * stride) as isize + u as isize - r, h);
                    for v in 0..k {
                        let col = reflect_index((oj * stride) as isize + v as isize - r, w);
                        let wgt = kv[u * k + v];
                        let src = &x[(row * w + col) * c..(row * w + col + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        let ctx = ConvStrideCtx { input, kernel, stride, h, w, c, k, oh, ow };
        Ok(self.push(Tensor::new(vec![oh, ow, c], out)?, Op::ConvStride(ctx), rg))
    }

    /// Stride-1 "same" convolution layer: `h × w × cin` input, `k × k × cin × cout`
    /// weights, per-output-channel bias, reflect padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != si[2] {
            return Err(dim_err!("conv2d of input {:?} with weights {:?}", si, sw));
        }
        let k = sw[0];
        if k % 2 == 0 {
            return Err(Error::Config(alloc::format!("kernel size {} must be odd", k)));
        }
        let (h, w, cin, cout) = (si[0], si[1], si[2], sw[3]);
        if self.value(bias).len() != cout {
            return Err(dim_err!("conv2d bias of length {} for {} outputs", self.value(bias).len(), cout));
        }
        let x = self.data(input);
        let wv = self.data(weight);
        let b = self.data(bias);
        let mut out: Vec<f64> = (0..h * w).flat_map(|_| b.iter().copied()).collect();
        let mut shifted = vec![0.0; h * w * cin];
        for tap in 0..k * k {
            shift_reflect(x, h, w, cin, k, tap, &mut shifted);
            let wt = &wv[tap * cin * cout..(tap + 1) * cin * cout];
            linalg::gemm(h * w, cin, cout, MatRef::rows(&shifted, cin), MatRef::rows(wt, cout), 1.0, &mut out);
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let ctx = ConvCtx { input, weight, bias, h, w, cin, cout, k };
        Ok(self.push(Tensor::new(vec![h, w, cout], out)?, Op::Conv(ctx), rg))
    }

    /// Nuclear norm of an `n × p` matrix, from the eigenvalues of its Gram
    /// matrix: `Σ √(λᵢ + eps)`.
    pub fn nuclear_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err!("nuclear norm needs a matrix, got {:?}", s));
        }
        let (rows, cols) = (s[0], s[1]);
        let g = linalg::gram(self.data(x), rows, cols);
        let eig = linalg::symmetric_eigen(&g, cols);
        let sq: Vec<f64> = eig.values.iter().map(|&l| math::sqrt(l.max(0.0) + eps)).collect();
        let value: f64 = sq.iter().sum();
        let inv_sqrt = sq.iter().map(|s| 1.0 / s).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Nuclear { x, cols, vectors: eig.vectors, inv_sqrt }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        linalg::gemm(m, n, k, MatRef::rows(&g, n), MatRef::transposed(self.data(*b), n), 0.0, &mut ga);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        linalg::gemm(k, m, n, MatRef::transposed(self.data(*a), k), MatRef::rows(&g, n), 0.0, &mut gb);
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let c = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads[a.0], c);
                    }
                    if self.rg(*b) {
                        let c = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads[b.0], c);
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], g),
                Op::AddBias { x, bias } => {
                    let last = self.value(*bias).len();
                    if self.rg(*bias) {
                        let mut gb = vec![0.0; last];
                        for row in g.chunks(last) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Activation(x, kind) => {
                    let xs = self.data(*x);
                    let ys = node.value.data();
                    let c = match kind {
                        Activation::Softplus => unreachable!("softplus is recorded with its slope"),
                        Activation::Relu => g.iter().zip(xs).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                        Activation::Sigmoid => g.iter().zip(ys).map(|(g, &s)| g * s * (1.0 - s)).collect(),
                        Activation::SoftmaxOverAll => {
                            let inner: f64 = g.iter().zip(ys).map(|(g, y)| g * y).sum();
                            g.iter().zip(ys).map(|(g, y)| y * (g - inner)).collect()
                        }
                    };
                    accumulate(&mut grads[x.0], c);
                }
                Op::Softplus { x, slope } => {
                    accumulate(&mut grads[x.0], g.iter().zip(slope).map(|(g, d)| g * d).collect());
                }
                Op::Square(x) => {
                    let c = g.iter().zip(self.data(*x)).map(|(g, v)| 2.0 * v * g).collect();
                    accumulate(&mut grads[x.0], c);
                }
                Op::Abs(x) => {
                    let c = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(g, &v)| {
                            if v > 0.0 {
                                *g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[x.0], c);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
                Op::SumLast { x, last } => {
                    let c = g.iter().flat_map(|&v| core::iter::repeat_n(v, *last)).collect();
                    accumulate(&mut grads[x.0], c);
                }
                Op::ConvStride(ctx) => self.conv_stride_backward(ctx, &g, &mut grads),
                Op::Conv(ctx) => self.conv_backward(ctx, &g, &mut grads),
                Op::Nuclear { x, cols, vectors, inv_sqrt } => {
                    let p = *cols;
                    // d‖X‖* / dX = X · V diag(1/√(λ+eps)) Vᵀ
                    let mut m = vec![0.0; p * p];
                    for i in 0..p {
                        for j in 0..p {
                            let mut s = 0.0;
                            for (l, d) in inv_sqrt.iter().enumerate() {
                                s += vectors[i * p + l] * d * vectors[j * p + l];
                            }
                            m[i * p + j] = s * g[0];
                        }
                    }
                    let rows = self.value(*x).len() / p;
                    let c = linalg::matmul(self.data(*x), &m, rows, p, p);
                    accumulate(&mut grads[x.0], c);
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.entry(Var(idx)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    fn conv_stride_backward(&self, ctx: &ConvStrideCtx, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ConvStrideCtx { input, kernel, stride, h, w, c, k, oh, ow } = *ctx;
        let r = (k / 2) as isize;
        let x = self.data(input);
        let kv = self.data(kernel);
        let want_x = self.rg(input);
        let want_k = self.rg(kernel);
        let mut gx = if want_x { vec![0.0; h * w * c] } else { Vec::new() };
        let mut gk = vec![0.0; k * k];
        for oi in 0..oh {
            for oj in 0..ow {
                let go = &g[(oi * ow + oj) * c..(oi * ow + oj + 1) * c];
                for u in 0..k {
                    let row = reflect_index((oi * stride) as isize + u as isize - r, h);
                    for v in 0..k {
                        let col = reflect_index((oj * stride) as isize + v as isize - r, w);
                        let off = (row * w + col) * c;
                        if want_k {
                            gk[u * k + v] += go.iter().zip(&x[off..off + c]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if want_x {
                            let wgt = kv[u * k + v];
                            for (d, s) in gx[off..off + c].iter_mut().zip(go) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            accumulate(&mut grads[input.0], gx);
        }
        if want_k {
            accumulate(&mut grads[kernel.0], gk);
        }
    }

    fn conv_backward(&self, ctx: &ConvCtx, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ConvCtx { input, weight, bias, h, w, cin, cout, k } = *ctx;
        let hw = h * w;
        if self.rg(bias) {
            let mut gb = vec![0.0; cout];
            for row in g.chunks(cout) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(&mut grads[bias.0], gb);
        }
        let (want_w, want_x) = (self.rg(weight), self.rg(input));
        if !want_w && !want_x {
            return;
        }
        let x = self.data(input);
        let wv = self.data(weight);
        let mut gw = if want_w { vec![0.0; k * k * cin * cout] } else { Vec::new() };
        let mut gx = if want_x { vec![0.0; hw * cin] } else { Vec::new() };
        let mut buf = vec![0.0; hw * cin];
        for tap in 0..k * k {
            let block = tap * cin * cout..(tap + 1) * cin * cout;
            if want_w {
                shift_reflect(x, h, w, cin, k, tap, &mut buf);
                linalg::gemm(cin, hw, cout, MatRef::transposed(&buf, cin), MatRef::rows(g, cout), 0.0, &mut gw[block.clone()]);
            }
            if want_x {
                linalg::gemm(hw, cout, cin, MatRef::rows(g, cout), MatRef::transposed(&wv[block], cout), 0.0, &mut buf);
                unshift_reflect_add(&buf, h, w, cin, k, tap, &mut gx);
            }
        }
        if want_w {
            accumulate(&mut grads[weight.0], gw);
        }
        if want_x {
            accumulate(&mut grads[input.0], gx);
        }
    }
}
