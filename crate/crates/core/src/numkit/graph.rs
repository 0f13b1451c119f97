//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so the tape order is already
//! a topological order and [`Graph::backward`] walks it once in reverse.
//! Parameters enter as borrowed leaves; only trainable ones receive gradients.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;

use super::tensor::Tensor;
use crate::seed::Rng;
use crate::{Error, Result};

/// `sqrt(2 / pi)`, the tanh-approximation constant for GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation for GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        name: String,
        trainable: bool,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    Conv1d {
        input: Var,
        kernel: Var,
    },
    MaxOverTime {
        input: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedMean {
        input: Var,
        mask: Vec<bool>,
    },
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Conv1d { .. } => "conv1d_valid",
            Op::MaxOverTime { .. } => "max_over_time",
            Op::LayerNorm { .. } => "layernorm",
            Op::Attention { .. } => "scaled_dot_attention",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::MaskedMean { .. } => "masked_mean",
            Op::Concat(..) => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param { .. } => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::AddBias(x, b) => vec![*x, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { input, kernel } => vec![*input, *kernel],
            Op::MaxOverTime { input, .. }
            | Op::Dropout { input, .. }
            | Op::MaskedMean { input, .. } => vec![*input],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.0.insert(name.into(), grad);
    }
}

/// A single-use computation graph. Parameters are borrowed for `'p`.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Owned(value),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the first handle.
    pub fn param(&mut self, name: &str, value: &'p Tensor, trainable: bool) -> Var {
        self.param_cow(name, Cow::Borrowed(value), trainable)
    }

    pub fn param_owned(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        self.param_cow(name, Cow::Owned(value), trainable)
    }

    fn param_cow(&mut self, name: &str, value: Cow<'p, Tensor>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param {
                name: name.to_owned(),
                trainable,
            },
            value,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_owned(), v);
        v
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops -------------------------------------------------

    /// `a [.., k] x b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, n, 0.0);
        let shape = with_last(av.shape(), n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out))
    }

    /// `a [.., k] x b[n, k]^T -> [.., n]`; the layout of linear-layer weights.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), &mut out, n, 0.0);
        let shape = with_last(av.shape(), n);
        self.push(Op::MatMulBt(a, b), Tensor::from_parts(shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    /// Adds a row vector to every row of `x`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || bv.numel() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::AddBias(x, bias), Tensor::from_parts(shape, out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.map(x, |v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    /// GELU, tanh approximation with [`GELU_SQRT_2_OVER_PI`] and [`GELU_CUBIC`].
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, gelu);
        self.push(Op::Gelu(x), out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Gathers rows of `table [V, D]` for `ids`; the result has `shape`, whose
    /// last dimension must be `D`. Rows for `pad` are zero and never updated.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[usize],
        shape: &[usize],
        pad: Option<usize>,
    ) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding_lookup", "table must be [V, D]"));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if shape.last() != Some(&dim) || shape.iter().product::<usize>() != ids.len() * dim {
            return Err(Error::shape(
                "embedding_lookup",
                format!("{} ids of dim {dim} cannot form {shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} outside vocabulary of {vocab}"),
            ));
        }
        let mut out = vec![0.0; ids.len() * dim];
        for (row, &id) in out.chunks_mut(dim).zip(ids) {
            if Some(id) != pad {
                row.copy_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
            }
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
            pad,
        };
        self.push(op, Tensor::from_parts(shape.to_vec(), out))
    }

    /// Valid 1-D convolution: `input [B, T, D]` with `kernel [W, D, F]`
    /// gives `[B, T - W + 1, F]`.
    pub fn conv1d_valid(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(input), self.value(kernel));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] {
            return Err(Error::shape(
                "conv1d_valid",
                format!("input {xs:?} with kernel {ks:?}"),
            ));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        let (w, f) = (ks[0], ks[2]);
        if w > t {
            return Err(Error::shape(
                "conv1d_valid",
                format!("kernel width {w} exceeds sequence length {t}"),
            ));
        }
        let tout = t - w + 1;
        let mut out = vec![0.0; b * tout * f];
        for bi in 0..b {
            gemm(
                tout,
                w * d,
                f,
                &xv.data()[bi * t * d..],
                (d, 1),
                kv.data(),
                (f, 1),
                &mut out[bi * tout * f..(bi + 1) * tout * f],
                f,
                0.0,
            );
        }
        self.push(
            Op::Conv1d { input, kernel },
            Tensor::from_parts(vec![b, tout, f], out),
        )
    }

    /// Per-channel maximum over time: `[B, T, F] -> [B, F]`, or `[T, F] -> [F]`.
    /// Ties resolve to the earliest timestep.
    pub fn max_over_time(&mut self, input: Var) -> Result<Var> {
        let xv = self.value(input);
        let (b, t, f, out_shape) = match *xv.shape() {
            [t, f] => (1, t, f, vec![f]),
            [b, t, f] => (b, t, f, vec![b, f]),
            _ => {
                return Err(Error::shape(
                    "max_over_time",
                    format!("expected [T, F] or [B, T, F], got {:?}", xv.shape()),
                ))
            }
        };
        let data = xv.data();
        let mut out = vec![f64::NEG_INFINITY; b * f];
        let mut argmax = vec![0usize; b * f];
        for bi in 0..b {
            for ti in 0..t {
                let row = &data[(bi * t + ti) * f..(bi * t + ti + 1) * f];
                for (c, &v) in row.iter().enumerate() {
                    if v > out[bi * f + c] {
                        out[bi * f + c] = v;
                        argmax[bi * f + c] = (bi * t + ti) * f + c;
                    }
                }
            }
        }
        self.push(
            Op::MaxOverTime { input, argmax },
            Tensor::from_parts(out_shape, out),
        )
    }

    /// Row-wise layer normalization over the last dimension, then
    /// `gamma * xhat + beta`.
    pub fn layernorm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(input), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let x = &xv.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (x[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push(op, Tensor::from_parts(shape, out))
    }

    /// Multi-head scaled dot-product attention on `[B, T, D]` inputs split
    /// into `heads` slices of width `D / heads`. `key_mask` (length `B * T`)
    /// marks valid keys; a query with no valid key attends to nothing and
    /// yields zeros.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let s = qv.shape();
        if s.len() != 3 || kv.shape() != s || vv.shape() != s {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("q {:?}, k {:?}, v {:?}", s, kv.shape(), vv.shape()),
            ));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        if key_mask.is_some_and(|m| m.len() != b * t) {
            return Err(Error::shape("scaled_dot_attention", "key mask length"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * d];
        let mut scores = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qrow = &qd[(bi * t + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if key_mask.is_some_and(|m| !m[bi * t + j]) {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kd[(bi * t + j) * d + off..][..dh];
                        let sc = scale * dot(qrow, krow);
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((bi * heads + h) * t + i) * t..][..t];
                    let mut z = 0.0;
                    for j in 0..t {
                        p[j] = (scores[j] - max).exp();
                        z += p[j];
                    }
                    let orow = &mut out[(bi * t + i) * d + off..][..dh];
                    for j in 0..t {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vd[(bi * t + j) * d + off..][..dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        };
        self.push(op, Tensor::from_parts(s.to_vec(), out))
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `keep_prob = 1`
    /// this is the identity and records nothing.
    pub fn dropout(&mut self, x: Var, keep_prob: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Contract(format!(
                "dropout keep probability {keep_prob} outside (0, 1]"
            )));
        }
        let Some(rng) = rng else { return Ok(x) };
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let inv = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep_prob { inv } else { 0.0 })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Dropout { input: x, mask }, Tensor::from_parts(shape, out))
    }

    /// Mean cross-entropy of `logits [B, C]` against class `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} for {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} outside {c} classes"),
            ));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut loss = 0.0;
        for (r, (row, &label)) in lv.data().chunks(c).zip(labels).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[label];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(op, Tensor::scalar(loss))
    }

    /// Mean over the time axis of `[B, T, D]`, counting only positions where
    /// `mask` (length `B * T`) is true. Rows with no valid position are zero.
    pub fn masked_mean(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(input);
        let [b, t, d] = *xv.shape() else {
            return Err(Error::shape("masked_mean", "expected [B, T, D]"));
        };
        if mask.len() != b * t {
            return Err(Error::shape("masked_mean", "mask length"));
        }
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count = mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let o = &mut out[bi * d..(bi + 1) * d];
            for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
                for (acc, x) in o.iter_mut().zip(&xv.data()[(bi * t + ti) * d..][..d]) {
                    *acc += x;
                }
            }
            o.iter_mut().for_each(|v| *v /= count as f64);
        }
        let op = Op::MaskedMean {
            input,
            mask: mask.to_vec(),
        };
        self.push(op, Tensor::from_parts(vec![b, d], out))
    }

    /// Concatenates `[R, n_i]` tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("part {:?} against {rows} rows", pv.shape()),
                ));
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + col..r * total + col + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            col += w;
        }
        self.push(
            Op::Concat(parts.to_vec()),
            Tensor::from_parts(vec![rows, total], out),
        )
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. Every trainable parameter in the
    /// graph gets an entry (zeros when the loss does not depend on it);
    /// frozen parameters get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Param { .. }) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param {
                name,
                trainable: true,
            } = &node.op
            {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                g.ensure_finite("backward")?;
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let ga = slot(grads, *a, av);
                    gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), ga.data_mut(), k, 1.0);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, bv);
                    gemm(k, m, n, av.data(), (1, k), gd, (n, 1), gb.data_mut(), n, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
                if self.needs(*a) {
                    let ga = slot(grads, *a, av);
                    gemm(m, n, k, gd, (n, 1), bv.data(), (k, 1), ga.data_mut(), k, 1.0);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, bv);
                    gemm(n, m, k, gd, (1, n), av.data(), (k, 1), gb.data_mut(), k, 1.0);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.needs(x) {
                        slot(grads, x, out).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(x) {
                        let ov = self.value(other).data();
                        let gx = slot(grads, x, out);
                        for ((acc, gi), oi) in gx.data_mut().iter_mut().zip(gd).zip(ov) {
                            *acc += gi * oi;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*x) {
                    slot(grads, *x, out).add_assign(g);
                }
                if self.needs(*bias) {
                    let n = out.cols();
                    let gb = slot(grads, *bias, self.value(*bias));
                    for row in gd.chunks(n) {
                        for (acc, gi) in gb.data_mut().iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                let gx = slot(grads, *x, out);
                for (acc, gi) in gx.data_mut().iter_mut().zip(gd) {
                    *acc += gi * factor;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, out);
                for ((acc, gi), xi) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    if *xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, out);
                for ((acc, gi), &xi) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    *acc += gi * gelu_grad(xi);
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x));
                gx.data_mut().iter_mut().for_each(|acc| *acc += gd[0]);
            }
            Op::Embedding { table, ids, pad } => {
                let tv = self.value(*table);
                let dim = tv.cols();
                let gt = slot(grads, *table, tv);
                for (row, &id) in gd.chunks(dim).zip(ids) {
                    if Some(id) == *pad {
                        continue;
                    }
                    for (acc, gi) in gt.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *acc += gi;
                    }
                }
            }
            Op::Conv1d { input, kernel } => {
                let (xv, kv) = (self.value(*input), self.value(*kernel));
                let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (w, f) = (kv.shape()[0], kv.shape()[2]);
                let tout = t - w + 1;
                if self.needs(*kernel) {
                    let gk = slot(grads, *kernel, kv);
                    for bi in 0..b {
                        gemm(
                            w * d,
                            tout,
                            f,
                            &xv.data()[bi * t * d..],
                            (1, d),
                            &gd[bi * tout * f..],
                            (f, 1),
                            gk.data_mut(),
                            f,
                            1.0,
                        );
                    }
                }
                if self.needs(*input) {
                    let mut cols = vec![0.0; tout * w * d];
                    let gx = slot(grads, *input, xv);
                    for bi in 0..b {
                        gemm(
                            tout,
                            f,
                            w * d,
                            &gd[bi * tout * f..],
                            (f, 1),
                            kv.data(),
                            (1, f),
                            &mut cols,
                            w * d,
                            0.0,
                        );
                        let base = bi * t * d;
                        for ti in 0..tout {
                            let dst = &mut gx.data_mut()[base + ti * d..base + ti * d + w * d];
                            for (acc, c) in dst.iter_mut().zip(&cols[ti * w * d..(ti + 1) * w * d]) {
                                *acc += c;
                            }
                        }
                    }
                }
            }
            Op::MaxOverTime { input, argmax } => {
                let gx = slot(grads, *input, self.value(*input));
                for (&src, gi) in argmax.iter().zip(gd) {
                    gx.data_mut()[src] += gi;
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, self.value(*gamma));
                    for (row, h) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, gi), hi) in gg.data_mut().iter_mut().zip(row).zip(h) {
                            *acc += gi * hi;
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, self.value(*beta));
                    for row in gd.chunks(d) {
                        for (acc, gi) in gb.data_mut().iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                }
                if self.needs(*input) {
                    let gx = slot(grads, *input, out);
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for c in 0..d {
                            dst[c] += is / d as f64 * (d as f64 * dxhat[c] - s1 - h[c] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward([*q, *k, *v], *heads, probs, g, grads),
            Op::Dropout { input, mask } => {
                let gx = slot(grads, *input, out);
                for ((acc, gi), m) in gx.data_mut().iter_mut().zip(gd).zip(mask) {
                    *acc += gi * m;
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gd[0] / labels.len() as f64;
                let gl = slot(grads, *logits, lv);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl.data_mut()[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::MaskedMean { input, mask } => {
                let xv = self.value(*input);
                let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gx = slot(grads, *input, xv);
                for bi in 0..b {
                    let count = mask[bi * t..(bi + 1) * t].iter().filter(|&&m| m).count();
                    if count == 0 {
                        continue;
                    }
                    let gr = &gd[bi * d..(bi + 1) * d];
                    for ti in (0..t).filter(|&ti| mask[bi * t + ti]) {
                        let dst = &mut gx.data_mut()[(bi * t + ti) * d..][..d];
                        for (acc, gi) in dst.iter_mut().zip(gr) {
                            *acc += gi / count as f64;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut col = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.needs(p) {
                        let gp = slot(grads, p, pv);
                        for r in 0..rows {
                            for (acc, gi) in gp.data_mut()[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&gd[r * total + col..r * total + col + w])
                            {
                                *acc += gi;
                            }
                        }
                    }
                    col += w;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        [q, k, v]: [Var; 3],
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = vec![0.0; b * t * d];
        let mut dk = vec![0.0; b * t * d];
        let mut dv = vec![0.0; b * t * d];
        let mut dp = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let p = &probs[((bi * heads + h) * t + i) * t..][..t];
                    let go = &gd[(bi * t + i) * d + off..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..t {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vd[(bi * t + j) * d + off..][..dh];
                        dp[j] = dot(go, vrow);
                        weighted += p[j] * dp[j];
                        let dvrow = &mut dv[(bi * t + j) * d + off..][..dh];
                        for (acc, x) in dvrow.iter_mut().zip(go) {
                            *acc += p[j] * x;
                        }
                    }
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let (qi, kj) = ((bi * t + i) * d + off, (bi * t + j) * d + off);
                        for c in 0..dh {
                            dq[qi + c] += ds * kd[kj + c];
                            dk[kj + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                let gx = slot(grads, var, qv);
                for (acc, x) in gx.data_mut().iter_mut().zip(&delta) {
                    *acc += x;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("shape is never empty") = last;
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t)
        + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product. Strides are
/// `(row, col)` pairs; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs + 1
    };
    assert!(k == 0 || a.len() >= extent(m, k, rsa, csa), "gemm: a out of bounds");
    assert!(k == 0 || b.len() >= extent(k, n, rsb, csb), "gemm: b out of bounds");
    assert!(c.len() >= extent(m, n, rsc, 1), "gemm: c out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
