//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so [`Graph::backward`] walks the tape once
//! in reverse. Gradients are only propagated into nodes that (transitively)
//! depend on a leaf created with `requires_grad`.

use std::rc::Rc;

use super::tensor::gemm;
use super::{CsrMatrix, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics recorded by a training-mode batchnorm node.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    SpMatMul(Rc<CsrMatrix<T>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log { x: Var, floor: T },
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats: Option<BnStats<T>>,
    },
    Concat(Vec<Var>),
    Gather { x: Var, indices: Rc<Vec<usize>> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    zero_norm_rows: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// `shape` viewed as `[outer, shape[axis], inner]`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::argument(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64(0.5)).exp()
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            zero_norm_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Rows that hit the zero-vector case of [`Graph::l2_normalize`] so far.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    /// Batch statistics of a training-mode batchnorm node.
    pub fn bn_stats(&self, v: Var) -> Option<&BnStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::argument(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Constant sparse `[m, k]` times `[k, n]`.
    pub fn sp_matmul(&mut self, a: Rc<CsrMatrix<T>>, b: Var) -> Result<Var> {
        let sb = self.shape(b);
        if sb.len() != 2 || sb[0] != a.cols {
            return Err(Error::argument(format!(
                "sp_matmul: incompatible shapes [{}, {}] and {sb:?}",
                a.rows, a.cols
            )));
        }
        let n = sb[1];
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); a.rows * n];
        for r in 0..a.rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for p in a.indptr[r]..a.indptr[r + 1] {
                let w = a.values[p];
                let brow = &bv[a.indices[p] * n..(a.indices[p] + 1) * n];
                for (o, &x) in orow.iter_mut().zip(brow) {
                    *o = *o + w * x;
                }
            }
        }
        let rg = self.rg(&[b]);
        let rows = a.rows;
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::SpMatMul(a, b), rg))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `row` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let w = *sx.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != w {
            return Err(Error::argument(format!("add_row: cannot add {sr:?} to rows of {sx:?}")));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(w.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |a| a * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * std_normal_cdf(a), Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.exp(), Op::Exp(x))
    }

    /// Natural log clamped below at `floor`; gradient is zero where clamped.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        self.unary(
            x,
            |a| {
                let l = a.ln();
                if l > floor {
                    l
                } else {
                    floor
                }
            },
            Op::Log { x, floor },
        )
    }

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::argument(format!(
                "{name}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    fn reduce(&mut self, name: &str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(name, x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(len as f64);
            out.iter_mut().for_each(|a| *a = *a * inv);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Normalizes along the last axis. A zero row maps to zero and is counted
    /// in [`Graph::zero_norm_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let w = *v.shape().last().ok_or_else(|| Error::argument("l2_normalize: scalar input"))?;
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / w.max(1));
        let mut zeros = 0;
        for row in out.chunks_mut(w.max(1)) {
            let n = row.iter().map(|a| *a * *a).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|a| *a = *a / n);
            } else {
                zeros += 1;
            }
            norms.push(n);
        }
        let shape = v.shape().to_vec();
        self.zero_norm_rows += zeros;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, norms }, rg))
    }

    /// Batch normalization of `[n, c]` input per channel.
    ///
    /// `Train` uses batch statistics (biased variance) and records them for
    /// the caller's running-average update; `Eval` uses the given running
    /// statistics and is a pure per-row function.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::argument(format!("batchnorm: expected [n, c] input, got {sx:?}")));
        }
        let (n, c) = (sx[0], sx[1]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::argument(format!(
                    "batchnorm: {name} has shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::argument("batchnorm: running statistics have wrong width"));
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::argument("batchnorm: training mode needs at least 2 rows"));
        }
        let eps = T::from_f64(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let nf = T::from_f64(n as f64);
                let mut mean = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for (m, &a) in mean.iter_mut().zip(row) {
                        *m = *m + a;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for ((s, &a), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (a - m) * (a - m);
                    }
                }
                let unbiased = var.iter().map(|&s| s / T::from_f64((n - 1) as f64)).collect();
                var.iter_mut().for_each(|s| *s = *s / nf);
                let stats = BnStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
            rg,
        ))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::argument("concat: no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::argument(format!(
                    "concat: shape {s:?} incompatible with trailing dims {tail:?}"
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows of `x` (axis 0) at `indices`; repeats allowed.
    pub fn gather(&mut self, x: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::argument("gather: scalar input"));
        }
        let w: usize = s[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::argument(format!("gather: index {bad} out of range for shape {s:?}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices.iter() {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, indices }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Affine map `x·W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar `loss`; consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(g);
        }

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let bv = nodes[b.0].value.data();
                    let av = nodes[a.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| gemm(m, n, k, &gy, false, bv, true, g, true));
                    acc(&mut grads, &nodes, *b, |g| gemm(k, m, n, av, true, &gy, false, g, true));
                }
                Op::SpMatMul(a, b) => {
                    let n = nodes[b.0].value.shape()[1];
                    acc(&mut grads, &nodes, *b, |g| {
                        for r in 0..a.rows {
                            let grow = &gy[r * n..(r + 1) * n];
                            for p in a.indptr[r]..a.indptr[r + 1] {
                                let w = a.values[p];
                                let dst = &mut g[a.indices[p] * n..(a.indices[p] + 1) * n];
                                for (d, &x) in dst.iter_mut().zip(grow) {
                                    *d = *d + w * x;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d + s));
                    acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d + s));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d + s));
                    acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d - s));
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| {
                        for ((d, &s), &o) in g.iter_mut().zip(&gy).zip(bv) {
                            *d = *d + s * o;
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for ((d, &s), &o) in g.iter_mut().zip(&gy).zip(av) {
                            *d = *d + s * o;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let w = nodes[row.0].value.len();
                    acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d + s));
                    acc(&mut grads, &nodes, *row, |g| {
                        for chunk in gy.chunks(w.max(1)) {
                            for (d, &s) in g.iter_mut().zip(chunk) {
                                *d = *d + s;
                            }
                        }
                    });
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gy).for_each(|(d, &v)| *d = *d + v * *s));
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, &nodes, *x, |g| {
                        for ((d, &s), &a) in g.iter_mut().zip(&gy).zip(xv) {
                            if a > T::zero() {
                                *d = *d + s;
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, &nodes, *x, |g| {
                        for ((d, &s), &a) in g.iter_mut().zip(&gy).zip(xv) {
                            *d = *d + s * (std_normal_cdf(a) + a * std_normal_pdf(a));
                        }
                    });
                }
                Op::Exp(x) => {
                    acc(&mut grads, &nodes, *x, |g| {
                        for ((d, &s), &e) in g.iter_mut().zip(&gy).zip(y) {
                            *d = *d + s * e;
                        }
                    });
                }
                Op::Log { x, floor } => {
                    let xv = nodes[x.0].value.data();
                    acc(&mut grads, &nodes, *x, |g| {
                        for (((d, &s), &a), &l) in g.iter_mut().zip(&gy).zip(xv).zip(y) {
                            if l > *floor {
                                *d = *d + s / a;
                            }
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    acc(&mut grads, &nodes, *x, |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| o * len * inner + j * inner + i;
                                let dotp: T = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                                for j in 0..len {
                                    g[at(j)] = g[at(j)] + y[at(j)] * (gy[at(j)] - dotp);
                                }
                            }
                        }
                    });
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let f = if matches!(node.op, Op::Mean { .. }) {
                        T::one() / T::from_f64(len as f64)
                    } else {
                        T::one()
                    };
                    acc(&mut grads, &nodes, *x, |g| {
                        for o in 0..outer {
                            for j in 0..len {
                                let base = o * len * inner + j * inner;
                                for i in 0..inner {
                                    g[base + i] = g[base + i] + gy[o * inner + i] * f;
                                }
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    let s = gy[0];
                    acc(&mut grads, &nodes, *x, |g| g.iter_mut().for_each(|d| *d = *d + s));
                }
                Op::L2Normalize { x, norms } => {
                    let w = *node.value.shape().last().unwrap();
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, &n) in norms.iter().enumerate() {
                            if n <= T::zero() {
                                continue;
                            }
                            let yr = &y[r * w..(r + 1) * w];
                            let gr = &gy[r * w..(r + 1) * w];
                            let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..w {
                                g[r * w + j] = g[r * w + j] + (gr[j] - yr[j] * dotp) / n;
                            }
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    stats,
                } => {
                    let c = inv_std.len();
                    let n = xhat.len() / c.max(1);
                    let gv = nodes[gamma.0].value.data();
                    acc(&mut grads, &nodes, *gamma, |g| {
                        for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                g[j] = g[j] + gr[j] * hr[j];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *beta, |g| {
                        for gr in gy.chunks(c) {
                            for j in 0..c {
                                g[j] = g[j] + gr[j];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *x, |g| {
                        if stats.is_none() {
                            for (r, gr) in gy.chunks(c).enumerate() {
                                for j in 0..c {
                                    g[r * c + j] = g[r * c + j] + gr[j] * gv[j] * inv_std[j];
                                }
                            }
                            return;
                        }
                        let nf = T::from_f64(n as f64);
                        let mut sum_dh = vec![T::zero(); c];
                        let mut sum_dh_h = vec![T::zero(); c];
                        for (gr, hr) in gy.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                sum_dh[j] = sum_dh[j] + dh;
                                sum_dh_h[j] = sum_dh_h[j] + dh * hr[j];
                            }
                        }
                        for r in 0..n {
                            for j in 0..c {
                                let dh = gy[r * c + j] * gv[j];
                                let h = xhat[r * c + j];
                                g[r * c + j] = g[r * c + j] + inv_std[j] / nf * (nf * dh - sum_dh[j] - h * sum_dh_h[j]);
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        let slice = &gy[offset..offset + len];
                        acc(&mut grads, &nodes, *p, |g| g.iter_mut().zip(slice).for_each(|(d, &s)| *d = *d + s));
                        offset += len;
                    }
                }
                Op::Gather { x, indices } => {
                    let w = if indices.is_empty() { 0 } else { gy.len() / indices.len() };
                    acc(&mut grads, &nodes, *x, |g| {
                        for (r, &i) in indices.iter().enumerate() {
                            for j in 0..w {
                                g[i * w + j] = g[i * w + j] + gy[r * w + j];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gy).for_each(|(d, &s)| *d = *d + s));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
