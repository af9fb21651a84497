//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation evaluates eagerly and appends one node holding its
//! output and the data its adjoint needs. [`Tape::gradients`] walks the nodes once in
//! reverse order. Parameters enter the tape through [`Tape::param`], which maps each
//! [`ParamId`] to a single leaf so shared parameters accumulate gradient from every use.

use std::collections::HashMap;

use rand::Rng;

use crate::kernels::{self, Window};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Floor applied to probabilities before taking logs in the likelihood loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batch statistics observed by a train-mode batch normalization, waiting to be
/// folded into the running statistics by [`ParamStore`] owners.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    AddSpatial(Var, Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Maxout2 {
        x: Var,
        pick: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    WeightedSum {
        annot: Var,
        alpha: Var,
    },
    Sum(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    stats: Vec<StatUpdate>,
}

/// Adjoints of every node reached from a loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols, cols)
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a rank-4 [N,C,H,W] tensor, got {shape:?}"),
        )),
    }
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

    /// Drops every node recorded at or after `len`. Used to reuse a prefix (for
    /// example encoder outputs) across many inference steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn record_stats(&mut self, update: StatUpdate) {
        self.stats.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let value = Tensor::new(shape, data).expect("kernel produced inconsistent shape");
        self.push(value, op)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        (x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let x = self.value(a);
        (x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let (s, d) = self.zip_with(a, b, |p, q| p + q);
        Ok(self.make(s, d, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let (s, d) = self.zip_with(a, b, |p, q| p - q);
        Ok(self.make(s, d, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let (s, d) = self.zip_with(a, b, |p, q| p * q);
        Ok(self.make(s, d, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (s, d) = self.map(a, |v| v * c);
        self.make(s, d, Op::Scale(a, c))
    }

    /// `a[..., D] + b[D]`, broadcasting `b` over leading axes.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(TensorError::mismatch("add_row", sa, sb));
        }
        let cols = sb[0];
        let bias = self.value(b).data().to_vec();
        let (s, mut d) = self.map(a, |v| v);
        for (i, v) in d.iter_mut().enumerate() {
            *v += bias[i % cols];
        }
        Ok(self.make(s, d, Op::AddRow(a, b)))
    }

    /// `a[N,C,H,W] + b[C]`.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, c, h, w) = nchw("add_channel", self.shape(a))?;
        if self.shape(b) != [c] {
            return Err(TensorError::mismatch("add_channel", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let plane = h * w;
        let (s, mut d) = self.map(a, |v| v);
        for (i, v) in d.iter_mut().enumerate() {
            *v += bias[(i / plane) % c];
        }
        Ok(self.make(s, d, Op::AddChannel(a, b)))
    }

    /// `a[N,C,H,W] + v[N,C]`, broadcasting `v` over every spatial cell.
    pub fn add_spatial(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = nchw("add_spatial", self.shape(a))?;
        if self.shape(v) != [n, c] {
            return Err(TensorError::mismatch("add_spatial", self.shape(a), self.shape(v)));
        }
        let vec = self.value(v).data().to_vec();
        let plane = h * w;
        let (s, mut d) = self.map(a, |x| x);
        for (i, x) in d.iter_mut().enumerate() {
            *x += vec[i / plane];
        }
        Ok(self.make(s, d, Op::AddSpatial(a, v)))
    }

    /// `x · wᵀ + bias` with `x` of shape `[N, in]` or `[in]` and `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (rows, inner) = match *sx.as_slice() {
            [k] => (1, k),
            [n, k] => (n, k),
            _ => return Err(TensorError::mismatch("linear", &sx, &sw)),
        };
        if sw.len() != 2 || sw[1] != inner {
            return Err(TensorError::mismatch("linear", &sx, &sw));
        }
        let out = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [out] {
                return Err(TensorError::mismatch("linear bias", &sw, self.shape(b)));
            }
        }
        let mut data = vec![0.0; rows * out];
        kernels::gemm(
            rows,
            inner,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut data,
            0.0,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let shape = if sx.len() == 1 { vec![out] } else { vec![rows, out] };
        Ok(self.make(shape, data, Op::Linear { x, w, bias }))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (n, cin, h, wd) = nchw("conv2d", self.shape(x))?;
        let sw = self.shape(w).to_vec();
        let [cout, wcin, kh, kw] = sw[..] else {
            return Err(TensorError::mismatch("conv2d", self.shape(x), &sw));
        };
        if wcin != cin || kh > h + 2 * pad.0 || kw > wd + 2 * pad.1 {
            return Err(TensorError::mismatch("conv2d", self.shape(x), &sw));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be at least 1"));
        }
        let geom = Window {
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            n,
            cin,
            cout,
            &geom,
        );
        let shape = vec![n, cout, geom.out_h(), geom.out_w()];
        Ok(self.make(shape, data, Op::Conv2d { x, w, geom }))
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<(usize, usize, Window), TensorError> {
        let (n, c, h, w) = nchw(op, self.shape(x))?;
        if window.0 == 0 || window.1 == 0 {
            return Err(TensorError::invalid(op, "empty pooling window"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid(op, "stride must be at least 1"));
        }
        if window.0 > h || window.1 > w {
            return Err(TensorError::invalid(
                op,
                format!("window {window:?} exceeds input extents {:?}", (h, w)),
            ));
        }
        let geom = Window {
            in_h: h,
            in_w: w,
            kh: window.0,
            kw: window.1,
            stride,
            pad: (0, 0),
        };
        Ok((n, c, geom))
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (n, c, geom) = self.pool_geometry("max_pool2d", x, window, stride)?;
        let (data, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, &geom);
        let shape = vec![n, c, geom.out_h(), geom.out_w()];
        Ok(self.make(shape, data, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let (n, c, geom) = self.pool_geometry("avg_pool2d", x, window, stride)?;
        let data = kernels::avg_pool_forward(self.value(x).data(), n * c, &geom);
        let shape = vec![n, c, geom.out_h(), geom.out_w()];
        Ok(self.make(shape, data, Op::AvgPool { x, geom }))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize), TensorError> {
        let (n, c, h, w) = nchw("batch_norm", self.shape(x))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::mismatch("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        Ok((n, c, h * w))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        invstd: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let (n, c, plane) = self.check_bn(x, gamma, beta).expect("checked by caller");
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for k in base..base + plane {
                    let xh = (xv.data()[k] - mean[ch]) * invstd[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + b[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.make(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            },
        )
    }

    /// Batch normalization with per-channel batch statistics over `N·H·W`.
    /// Returns the output together with the batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), TensorError> {
        let (n, c, plane) = self.check_bn(x, gamma, beta)?;
        let m = (n * plane) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                let base = (i * c + ch) * plane;
                *mu += xv[base..base + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                var[ch] += xv[base..base + plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let invstd = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, invstd, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(TensorError::mismatch(
                "batch_norm",
                self.shape(x),
                running_mean.shape(),
            ));
        }
        let invstd = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean.data(), invstd, false))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (s, d) = self.map(x, |v| v.max(0.0));
        self.make(s, d, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (s, d) = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.make(s, d, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (s, d) = self.map(x, f64::tanh);
        self.make(s, d, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, cols) = last_axis(xv.shape());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.make(shape, out, Op::Softmax(x))
    }

    /// Softmax over the last axis restricted to cells where `mask` is nonzero;
    /// masked cells get probability exactly 0 and do not enter the normalizer.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(TensorError::mismatch("masked_softmax", xv.shape(), mask.shape()));
        }
        let (_, cols) = last_axis(xv.shape());
        let mut out = vec![0.0; xv.len()];
        for ((row, m), dst) in xv
            .data()
            .chunks(cols)
            .zip(mask.data().chunks(cols))
            .zip(out.chunks_mut(cols))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k != 0.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::invalid(
                    "masked_softmax",
                    "every cell of a row is masked",
                ));
            }
            let mut total = 0.0;
            for ((d, &v), &k) in dst.iter_mut().zip(row).zip(m) {
                if k != 0.0 {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let shape = xv.shape().to_vec();
        Ok(self.make(shape, out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, cols) = last_axis(xv.shape());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xv.shape().to_vec();
        self.make(shape, out, Op::LogSoftmax(x))
    }

    /// Maxout with pool size 2 over the last axis, halving it.
    pub fn maxout2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = last_axis(xv.shape());
        if cols % 2 != 0 {
            return Err(TensorError::invalid(
                "maxout2",
                format!("last extent {cols} is odd"),
            ));
        }
        let half = cols / 2;
        let mut out = Vec::with_capacity(rows * half);
        let mut pick = Vec::with_capacity(rows * half);
        for r in 0..rows {
            for j in 0..half {
                let i = r * cols + 2 * j;
                let (a, b) = (xv.data()[i], xv.data()[i + 1]);
                if b > a {
                    out.push(b);
                    pick.push(i + 1);
                } else {
                    out.push(a);
                    pick.push(i);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = half;
        Ok(self.make(shape, out, Op::Maxout2 { x, pick }))
    }

    /// Inverted dropout. Identity (no node) in infer mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.make(shape, data, Op::Dropout { x, mask }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.make(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
        ))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table);
        let [rows, dim] = st[..] else {
            return Err(TensorError::invalid("embedding", format!("table shape {st:?}")));
        };
        if ids.is_empty() {
            return Err(TensorError::invalid("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "embedding",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        Ok(self.make(
            vec![ids.len(), dim],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `out[n, c] = Σ_l alpha[n, l] · annot[n, c, l]` over the `L = H·W` cells.
    pub fn weighted_sum(&mut self, annot: Var, alpha: Var) -> Result<Var, TensorError> {
        let (n, c, h, w) = nchw("weighted_sum", self.shape(annot))?;
        if self.shape(alpha) != [n, h * w] {
            return Err(TensorError::mismatch(
                "weighted_sum",
                self.shape(annot),
                self.shape(alpha),
            ));
        }
        let l = h * w;
        let mut data = vec![0.0; n * c];
        let (av, al) = (self.value(annot).data(), self.value(alpha).data());
        for i in 0..n {
            kernels::gemm(
                c,
                l,
                1,
                &av[i * c * l..(i + 1) * c * l],
                false,
                &al[i * l..(i + 1) * l],
                false,
                &mut data[i * c..(i + 1) * c],
                0.0,
            );
        }
        Ok(self.make(vec![n, c], data, Op::WeightedSum { annot, alpha }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `-Σ_i weights[i] · max(logp[i, targets[i]], ln PROB_FLOOR)` for `logp[R, K]`.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var, TensorError> {
        let s = self.shape(logp);
        let [rows, k] = s[..] else {
            return Err(TensorError::invalid("nll", format!("expected [R,K], got {s:?}")));
        };
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::invalid(
                "nll",
                format!(
                    "{rows} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::invalid("nll", format!("target {bad} >= {k}")));
        }
        let floor = PROB_FLOOR.ln();
        let lv = self.value(logp).data();
        let loss: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&t, &w))| -w * lv[i * k + t].max(floor))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Adjoints of all nodes with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, g.data(), &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Writes `∂loss/∂p` into every parameter of `store`; parameters absent from
    /// this tape or off the loss path get zero.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        macro_rules! grad_of {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(grad_of!(*a), g, 1.0);
                axpy(grad_of!(*b), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(grad_of!(*a), g, 1.0);
                axpy(grad_of!(*b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                for ((d, gg), v) in grad_of!(*a).iter_mut().zip(g).zip(vb) {
                    *d += gg * v;
                }
                for ((d, gg), v) in grad_of!(*b).iter_mut().zip(g).zip(va) {
                    *d += gg * v;
                }
            }
            Op::Scale(a, c) => axpy(grad_of!(*a), g, *c),
            Op::AddRow(a, b) => {
                axpy(grad_of!(*a), g, 1.0);
                let db = grad_of!(*b);
                let cols = db.len();
                for row in g.chunks(cols) {
                    axpy(db, row, 1.0);
                }
            }
            Op::AddChannel(a, b) => {
                axpy(grad_of!(*a), g, 1.0);
                let s = nodes[a.0].value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let db = grad_of!(*b);
                for (blk, chunk) in g.chunks(plane).enumerate() {
                    db[blk % c] += chunk.iter().sum::<f64>();
                }
            }
            Op::AddSpatial(a, v) => {
                axpy(grad_of!(*a), g, 1.0);
                let s = nodes[a.0].value.shape();
                let plane = s[2] * s[3];
                let dv = grad_of!(*v);
                for (blk, chunk) in g.chunks(plane).enumerate() {
                    dv[blk] += chunk.iter().sum::<f64>();
                }
            }
            Op::Linear { x, w, bias } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (out, inner) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / inner;
                kernels::gemm(rows, out, inner, g, false, wv.data(), false, grad_of!(*x), 1.0);
                kernels::gemm(out, rows, inner, g, true, xv.data(), false, grad_of!(*w), 1.0);
                if let Some(b) = bias {
                    let db = grad_of!(*b);
                    for row in g.chunks(out) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, cin, cout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                let (dx, dw) =
                    kernels::conv2d_backward(xv.data(), wv.data(), g, n, cin, cout, geom);
                axpy(grad_of!(*x), &dx, 1.0);
                axpy(grad_of!(*w), &dw, 1.0);
            }
            Op::MaxPool { x, argmax } => {
                let dx = grad_of!(*x);
                for (&idx, gg) in argmax.iter().zip(g) {
                    dx[idx] += gg;
                }
            }
            Op::AvgPool { x, geom } => {
                let s = nodes[x.0].value.shape();
                let dx = kernels::avg_pool_backward(g, s[0] * s[1], geom);
                axpy(grad_of!(*x), &dx, 1.0);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            } => {
                let s = nodes[x.0].value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = nodes[gamma.0].value.data().to_vec();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for k in base..base + plane {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                axpy(grad_of!(*gamma), &sum_gx, 1.0);
                axpy(grad_of!(*beta), &sum_g, 1.0);
                let m = (n * plane) as f64;
                let dx = grad_of!(*x);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k0 = gv[ch] * invstd[ch];
                        for k in base..base + plane {
                            dx[k] += if *batch_stats {
                                k0 * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                            } else {
                                k0 * g[k]
                            };
                        }
                    }
                }
            }
            Op::Relu(x) => {
                for ((d, gg), yy) in grad_of!(*x).iter_mut().zip(g).zip(y) {
                    if *yy > 0.0 {
                        *d += gg;
                    }
                }
            }
            Op::Sigmoid(x) => {
                for ((d, gg), yy) in grad_of!(*x).iter_mut().zip(g).zip(y) {
                    *d += gg * yy * (1.0 - yy);
                }
            }
            Op::Tanh(x) => {
                for ((d, gg), yy) in grad_of!(*x).iter_mut().zip(g).zip(y) {
                    *d += gg * (1.0 - yy * yy);
                }
            }
            Op::Softmax(x) => {
                let (_, cols) = last_axis(nodes[i].value.shape());
                let dx = grad_of!(*x);
                for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yy * (gg - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = last_axis(nodes[i].value.shape());
                let dx = grad_of!(*x);
                for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for ((d, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gg - yy.exp() * total;
                    }
                }
            }
            Op::Maxout2 { x, pick } => {
                let dx = grad_of!(*x);
                for (&idx, gg) in pick.iter().zip(g) {
                    dx[idx] += gg;
                }
            }
            Op::Dropout { x, mask } => {
                for ((d, gg), m) in grad_of!(*x).iter_mut().zip(g).zip(mask) {
                    *d += gg * m;
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| nodes[p.0].value.len()).sum::<usize>() / outer;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.len() / outer;
                    let dp = grad_of!(p);
                    for o in 0..*outer {
                        axpy(
                            &mut dp[o * chunk..(o + 1) * chunk],
                            &g[o * total + offset..o * total + offset + chunk],
                            1.0,
                        );
                    }
                    offset += chunk;
                }
                debug_assert_eq!(offset % inner, 0);
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.dim(1);
                let dt = grad_of!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut dt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim], 1.0);
                }
            }
            Op::Reshape(x) => axpy(grad_of!(*x), g, 1.0),
            Op::WeightedSum { annot, alpha } => {
                let s = nodes[annot.0].value.shape();
                let (n, c, l) = (s[0], s[1], s[2] * s[3]);
                let (av, al) = (nodes[annot.0].value.data(), nodes[alpha.0].value.data());
                let da = grad_of!(*annot);
                for b in 0..n {
                    for ch in 0..c {
                        let gg = g[b * c + ch];
                        let row = &mut da[(b * c + ch) * l..(b * c + ch + 1) * l];
                        axpy(row, &al[b * l..(b + 1) * l], gg);
                    }
                }
                let dal = grad_of!(*alpha);
                for b in 0..n {
                    kernels::gemm(
                        1,
                        c,
                        l,
                        &g[b * c..(b + 1) * c],
                        false,
                        &av[b * c * l..(b + 1) * c * l],
                        false,
                        &mut dal[b * l..(b + 1) * l],
                        1.0,
                    );
                }
            }
            Op::Sum(x) => {
                let gg = g[0];
                grad_of!(*x).iter_mut().for_each(|d| *d += gg);
            }
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let k = nodes[logp.0].value.dim(1);
                let lv = nodes[logp.0].value.data();
                let floor = PROB_FLOOR.ln();
                let dl = grad_of!(*logp);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if lv[r * k + t] > floor {
                        dl[r * k + t] -= w * g[0];
                    }
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, created as zeros on first use.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()))
        .data_mut()
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
