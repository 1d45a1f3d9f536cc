//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Inputs always precede outputs on the tape, so a
//! single reverse sweep visits nodes in a valid topological order.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_row, Tensor};

/// Lower clamp applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention masking: causal (query `i` sees keys `≤ i`) and/or per-key validity.
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    pub causal: bool,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            causal: true,
            key_valid: None,
        }
    }

    pub fn keys(valid: Vec<bool>) -> Self {
        Self {
            causal: false,
            key_valid: Some(valid),
        }
    }

    fn allows(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|v| v[j])
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    KlDiv(Var, Var),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Build a forward pass through its methods, then call
/// [`Tape::backward`] on a scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Marks the current end of the tape for a later [`Tape::rewind`].
    pub fn checkpoint(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Vars created since are invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.truncate(mark);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(shape_err!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul: inner dimensions disagree, {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t lhs")?;
        let (n, k2) = self.dims2(b, "matmul_t rhs")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul_t: inner dimensions disagree, {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{what}: shapes differ, {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Adds a row vector `b` (length = last axis of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(shape_err!(
                "add_row: bias {:?} does not match rows of {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, rg, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale(x, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return Err(shape_err!("layer_norm over an empty axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err!(
                "layer_norm: gain {:?}/bias {:?} do not match width {d}",
                self.value(gain).shape(),
                self.value(bias).shape()
            ));
        }
        let rows = self.value(x).rows();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{what}: NaN in input")));
        }
        Ok(())
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let c = self.value(x).cols();
        let mut out = vec![0.0; self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            softmax_row(src, dst);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax")?;
        let c = self.value(x).cols();
        let mut out = vec![0.0; self.value(x).len()];
        for (src, dst) in self.value(x).data().chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::LogSoftmax(x)))
    }

    /// Selects rows of a matrix. Doubles as embedding lookup; the backward
    /// rule scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err!("gather_rows: index {bad} out of range for {r} rows"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err!(
                    "concat_rows: width {pc} does not match {c}"
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, c, out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Multi-head scaled dot-product attention. `q` is `n×d`, `k` and `v` are
    /// `m×d`; heads split `d` into contiguous column blocks. Masked keys get
    /// exactly zero weight; a query with no visible key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention query")?;
        let (m, dk) = self.dims2(k, "attention key")?;
        let (mv, dv) = self.dims2(v, "attention value")?;
        if dk != d || dv != d || mv != m {
            return Err(shape_err!(
                "attention: q {:?}, k {:?}, v {:?} are incompatible",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("attention: width {d} not divisible by {heads} heads"));
        }
        if let Some(kv) = &mask.key_valid {
            if kv.len() != m {
                return Err(shape_err!("attention: key mask has {} entries for {m} keys", kv.len()));
            }
        }
        if mask.causal && n > m {
            return Err(shape_err!("attention: causal mask needs at least as many keys as queries"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; heads * n * m];
        let mut qh = vec![0.0; n * dh];
        let mut kh = vec![0.0; m * dh];
        let mut vh = vec![0.0; m * dh];
        let mut oh = vec![0.0; n * dh];
        for h in 0..heads {
            copy_cols(qd, d, h * dh, dh, &mut qh);
            copy_cols(kd, d, h * dh, dh, &mut kh);
            copy_cols(vd, d, h * dh, dh, &mut vh);
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm_nt(n, dh, m, &qh, &kh, p);
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask.allows(i, j) { *s * scale } else { f64::NEG_INFINITY };
                }
                let src = row.to_vec();
                softmax_row(&src, row);
            }
            oh.iter_mut().for_each(|o| *o = 0.0);
            gemm_nn(n, m, dh, p, &vh, &mut oh);
            put_cols(&oh, d, h * dh, dh, &mut out);
        }
        let t = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err!("cross_entropy: {} targets for {n} rows", targets.len()));
        }
        self.check_finite(logits, "cross_entropy")?;
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Input("cross_entropy: every target position is padding".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(shape_err!("cross_entropy: target {bad} out of range for {c} classes"));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &self.value(logits).data()[r * c..(r + 1) * c];
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            if let Some(t) = *t {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        loss /= count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean sigmoid binary cross-entropy of `logits` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != labels.len() {
            return Err(shape_err!(
                "bce_with_logits: {} logits for {} labels",
                x.len(),
                labels.len()
            ));
        }
        if x.is_empty() {
            return Err(Error::Input("bce_with_logits: no logits".into()));
        }
        self.check_finite(logits, "bce_with_logits")?;
        let loss = x
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `KL(p ‖ q) = Σ p ln(p / q)` over two probability vectors.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        for (name, d) in [("p", pd), ("q", qd)] {
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Numeric(format!("kl_div: {name} has a negative or non-finite entry")));
            }
            let s: f64 = d.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("kl_div: {name} sums to {s}, not 1")));
            }
        }
        let mut loss = 0.0;
        for (i, (&pi, &qi)) in pd.iter().zip(qd).enumerate() {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "kl_div: q[{i}] is zero where p[{i}] = {pi}; clamp q first"
                    )));
                }
                loss += pi * (pi.max(PROB_FLOOR).ln() - qi.ln());
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::KlDiv(p, q)))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Dropout(x, mask))
    }

    /// Backpropagates from a scalar node, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(&nodes[a.0].value);
                let n = nodes[b.0].value.cols();
                if let Some(da) = acc(grads, nodes, *a) {
                    gemm_nt(m, n, k, g, val(*b), da);
                }
                if let Some(db) = acc(grads, nodes, *b) {
                    gemm_tn(k, m, n, val(*a), g, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = mat_dims(&nodes[a.0].value);
                let n = nodes[b.0].value.rows();
                if let Some(da) = acc(grads, nodes, *a) {
                    gemm_nn(m, n, k, g, val(*b), da);
                }
                if let Some(db) = acc(grads, nodes, *b) {
                    gemm_tn(n, m, k, g, val(*a), db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc(grads, nodes, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc(grads, nodes, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = acc(grads, nodes, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    axpy(dx, g, 1.0);
                }
                let c = nodes[x.0].value.cols().max(1);
                if let Some(db) = acc(grads, nodes, *b) {
                    for row in g.chunks(c) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    axpy(dx, g, *s);
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(val(*x)) {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[x.0].value.cols();
                let gn = val(*gain);
                if let Some(dg) = acc(grads, nodes, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = acc(grads, nodes, *bias) {
                    for gr in g.chunks(d) {
                        axpy(db, gr, 1.0);
                    }
                }
                if let Some(dx) = acc(grads, nodes, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gn[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = nodes[x.0].value.cols().max(1);
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = nodes[x.0].value.cols().max(1);
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = nodes[x.0].value.cols();
                if let Some(dx) = acc(grads, nodes, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut dx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = acc(grads, nodes, *p) {
                        axpy(dp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    axpy(dx, g, 1.0);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len().max(1) as f64;
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = mat_dims(&nodes[q.0].value);
                let m = nodes[k.0].value.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * d];
                let mut goh = vec![0.0; n * dh];
                let mut qh = vec![0.0; n * dh];
                let mut kh = vec![0.0; m * dh];
                let mut vh = vec![0.0; m * dh];
                let mut dp = vec![0.0; n * m];
                let mut tmp_q = vec![0.0; n * dh];
                let mut tmp_kv = vec![0.0; m * dh];
                for h in 0..*heads {
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    copy_cols(g, d, h * dh, dh, &mut goh);
                    copy_cols(qd, d, h * dh, dh, &mut qh);
                    copy_cols(kd, d, h * dh, dh, &mut kh);
                    copy_cols(vd, d, h * dh, dh, &mut vh);
                    // dV = Pᵀ dO
                    tmp_kv.iter_mut().for_each(|x| *x = 0.0);
                    gemm_tn(m, n, dh, p, &goh, &mut tmp_kv);
                    add_cols(&tmp_kv, d, h * dh, dh, &mut gv);
                    // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nt(n, dh, m, &goh, &vh, &mut dp);
                    for i in 0..n {
                        let pr = &p[i * m..(i + 1) * m];
                        let dr = &mut dp[i * m..(i + 1) * m];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    tmp_q.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nn(n, m, dh, &dp, &kh, &mut tmp_q);
                    add_cols(&tmp_q, d, h * dh, dh, &mut gq);
                    tmp_kv.iter_mut().for_each(|x| *x = 0.0);
                    gemm_tn(m, n, dh, &dp, &qh, &mut tmp_kv);
                    add_cols(&tmp_kv, d, h * dh, dh, &mut gk);
                }
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(dx) = acc(grads, nodes, var) {
                        axpy(dx, &gr, 1.0);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = nodes[logits.0].value.cols();
                if let Some(dx) = acc(grads, nodes, *logits) {
                    let s = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let dr = &mut dx[r * c..(r + 1) * c];
                            axpy(dr, &probs[r * c..(r + 1) * c], s);
                            dr[t] -= s;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let n = labels.len() as f64;
                let x = val(*logits);
                if let Some(dx) = acc(grads, nodes, *logits) {
                    for ((d, &xi), &yi) in dx.iter_mut().zip(x).zip(labels) {
                        let sig = 1.0 / (1.0 + (-xi).exp());
                        *d += g[0] * (sig - yi) / n;
                    }
                }
            }
            Op::KlDiv(p, q) => {
                let (pd, qd) = (val(*p), val(*q));
                if let Some(dp) = acc(grads, nodes, *p) {
                    for ((d, &pi), &qi) in dp.iter_mut().zip(pd).zip(qd) {
                        let qi = qi.max(PROB_FLOOR);
                        *d += g[0] * (pi.max(PROB_FLOOR).ln() - qi.ln() + 1.0);
                    }
                }
                if let Some(dq) = acc(grads, nodes, *q) {
                    for ((d, &pi), &qi) in dq.iter_mut().zip(pd).zip(qd) {
                        *d -= g[0] * pi / qi.max(PROB_FLOOR);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
        }
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn copy_cols(src: &[f64], width: usize, start: usize, len: usize, dst: &mut [f64]) {
    for (r, out) in dst.chunks_mut(len).enumerate() {
        out.copy_from_slice(&src[r * width + start..r * width + start + len]);
    }
}

fn put_cols(src: &[f64], width: usize, start: usize, len: usize, dst: &mut [f64]) {
    for (r, row) in src.chunks(len).enumerate() {
        dst[r * width + start..r * width + start + len].copy_from_slice(row);
    }
}

fn add_cols(src: &[f64], width: usize, start: usize, len: usize, dst: &mut [f64]) {
    for (r, row) in src.chunks(len).enumerate() {
        axpy(&mut dst[r * width + start..r * width + start + len], row, 1.0);
    }
}
