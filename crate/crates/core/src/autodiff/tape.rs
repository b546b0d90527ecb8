//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward primitive as a node in creation order, which
//! is already a topological order. [`Tape::backward`] sweeps the nodes in reverse
//! and accumulates gradients into every node that (transitively) depends on a
//! leaf created with [`Tape::leaf`]. Values entered through [`Tape::constant`] or
//! [`Tape::detach`] never receive gradients.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Linear(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SmoothL1(Var, Var, f64),
    BceWithLogits(Var, Tensor, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn smooth_l1_elem(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn softplus_neg_abs(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape(
                "add_row",
                format!(
                    "{:?} vs row {:?}",
                    self.value(a).shape(),
                    self.value(row).shape()
                ),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            false,
            false,
            &mut out,
            false,
        );
        let v = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self
            .value(a)
            .reshaped(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {m} rows"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let v = Tensor::matrix(idx.len(), n, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {c} vs {n}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::matrix(rows, n, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let v = Tensor::matrix(m, len, out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row count {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::matrix(m, total, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise softmax of `a + mask`. Entries whose mask is `-inf` get exactly
    /// zero probability; a fully masked row yields all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask {:?} vs input {:?}", mk.shape(), self.value(a).shape()),
                ));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = src[i * n + j] + mask.map_or(0.0, |mk| mk.data()[i * n + j]);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SoftmaxRows(a), rg))
    }

    /// Per-row normalization followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// `x · w + b` for `x: m×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2("linear")?;
        let (k2, n) = self.value(w).dims2("linear")?;
        if k != k2 || self.value(b).len() != n {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        let bias = self.value(b).data();
        for i in 0..m {
            out[i * n..(i + 1) * n].copy_from_slice(bias);
        }
        gemm(
            self.value(x).data(),
            self.value(w).data(),
            m,
            k,
            n,
            false,
            false,
            &mut out,
            true,
        );
        let v = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(v, Op::Linear(x, w, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Column sums of an `m×n` matrix as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(out), Op::SumRows(a), rg))
    }

    /// Mean smooth-L1 distance; quadratic for `|d| < beta`, linear beyond.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1", pred, target)?;
        if beta <= 0.0 {
            return Err(Error::InvalidArgument(format!("smooth_l1 beta {beta}")));
        }
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::shape("smooth_l1", "empty tensors"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| smooth_l1_elem(p - t, beta))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(s / n as f64),
            Op::SmoothL1(pred, target, beta),
            rg,
        ))
    }

    /// Mean of `w * BCE(sigmoid(logits), targets)` over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, weights: &Tensor) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                format!(
                    "logits {:?}, targets {:?}, weights {:?}",
                    self.value(logits).shape(),
                    targets.shape(),
                    weights.shape()
                ),
            ));
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + softplus_neg_abs(x)))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s / n as f64),
            Op::BceWithLogits(logits, targets.clone(), weights.clone()),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &gg), &y) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += gg * y;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, &gg), &x) in gb.iter_mut().zip(gd).zip(va) {
                        *o += gg * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let (m, n) = g.dims2("add_row")?;
                self.accumulate_with(grads, *row, |gr| {
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += gd[i * n + j];
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let (_, n) = self.value(*b).dims2("matmul")?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |ga| gemm(gd, vb, m, n, k, false, true, ga, true));
                self.accumulate_with(grads, *b, |gb| gemm(va, gd, k, m, n, true, false, gb, true));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose2()?),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(shape)?);
            }
            Op::GatherRows(a, idx) => {
                let (_, n) = self.value(*a).dims2("gather_rows")?;
                self.accumulate_with(grads, *a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += gd[r * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &gd[off..off + len];
                    self.accumulate_with(grads, p, |gp| {
                        gp.iter_mut().zip(slice).for_each(|(o, &x)| *o += x)
                    });
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let (_, w) = g.dims2("slice_cols")?;
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2("concat_cols")?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2("concat_cols")?;
                    self.accumulate_with(grads, p, |gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += gd[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2("softmax_rows")?;
                let y = node.value.data();
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        let dot: f64 = (0..n).map(|j| gd[i * n + j] * y[i * n + j]).sum();
                        for j in 0..n {
                            ga[i * n + j] += y[i * n + j] * (gd[i * n + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2("layer_norm")?;
                let gam = self.value(*gamma).data();
                self.accumulate_with(grads, *beta, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gd[i * n + j];
                        }
                    }
                });
                self.accumulate_with(grads, *gamma, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                self.accumulate_with(grads, *x, |gx| {
                    for i in 0..m {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..n {
                            let gh = gd[i * n + j] * gam[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[i * n + j];
                        }
                        mean_g /= n as f64;
                        mean_gx /= n as f64;
                        for j in 0..n {
                            let gh = gd[i * n + j] * gam[j];
                            gx[i * n + j] += rstd[i] * (gh - mean_g - xhat[i * n + j] * mean_gx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, &gg), &x) in ga.iter_mut().zip(gd).zip(va) {
                        *o += gg * gelu_grad(x);
                    }
                });
            }
            Op::Linear(x, w, b) => {
                let (m, k) = self.value(*x).dims2("linear")?;
                let (_, n) = self.value(*w).dims2("linear")?;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate_with(grads, *x, |gx| gemm(gd, vw, m, n, k, false, true, gx, true));
                self.accumulate_with(grads, *w, |gw| gemm(vx, gd, k, m, n, true, false, gw, true));
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gd[i * n + j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate_with(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = gd[0] / self.value(*a).len() as f64;
                self.accumulate_with(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dims2("sum_rows")?;
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gd[j];
                        }
                    }
                });
            }
            Op::SmoothL1(p, t, beta) => {
                let (vp, vt) = (self.value(*p).data(), self.value(*t).data());
                let scale = gd[0] / vp.len() as f64;
                let dg: Vec<f64> = vp
                    .iter()
                    .zip(vt)
                    .map(|(a, b)| scale * smooth_l1_grad(a - b, *beta))
                    .collect();
                self.accumulate_with(grads, *p, |gp| {
                    gp.iter_mut().zip(&dg).for_each(|(o, d)| *o += d)
                });
                self.accumulate_with(grads, *t, |gt| {
                    gt.iter_mut().zip(&dg).for_each(|(o, d)| *o -= d)
                });
            }
            Op::BceWithLogits(l, y, w) => {
                let vl = self.value(*l).data();
                let scale = gd[0] / vl.len() as f64;
                self.accumulate_with(grads, *l, |gl| {
                    for (i, o) in gl.iter_mut().enumerate() {
                        *o += scale * w.data()[i] * (sigmoid(vl[i]) - y.data()[i]);
                    }
                });
            }
        }
        Ok(())
    }
}
