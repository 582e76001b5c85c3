//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node holding its output
//! value. Nodes only reference earlier nodes, so the tape is already in
//! topological order and [`Tape::backward`] walks it in exact reverse.
//! A node takes part in the backward pass only if some input needs a
//! gradient; frozen weights enter as constants and cost nothing there.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Dynamic tape, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any flowed to it) into `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("tape holds rank-1 and rank-2 values only"),
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_rank(&self, t: &Tensor) -> Result<()> {
        if t.shape().len() > 2 {
            return Err(Error::contract(format!(
                "tape values are vectors or matrices, got shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Records `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.check_rank(t)?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf))
    }

    /// Records `t` as a constant regardless of its `requires_grad` flag.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.check_rank(t)?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rc(&self.nodes[v.0].shape)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, ng, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Scale(a, s))
    }

    /// `x[m×n] + bias[n]` broadcast over rows; the only broadcast supported.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), out, ng, Op::AddRowBias(x, bias)))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, ng, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            softmax_row(&mut out[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, ng, Op::Softmax(x))
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; the rest
    /// of the row is exactly zero and never reads its inputs.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m != n {
            return Err(Error::shape("causal_softmax_rows", self.shape(x), &[m, m]));
        }
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..i * n + i + 1];
            row.copy_from_slice(&src[i * n..i * n + i + 1]);
            softmax_row(row);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m, n], out, ng, Op::CausalSoftmax(x)))
    }

    /// Per-row standardization followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        if self.shape(gain) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
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
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            vec![m, n],
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over masked positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::TokenId { id: target, vocab: v });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - row[target];
            for j in 0..v {
                probs[i * v + j] = (row[j] - log_z).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss / count as f64],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, n) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, n], out, ng, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (m, _) = self.dims(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![m, total], out, ng, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start + len, n]));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(vec![len, n], out, ng, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[m, start + len]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m, len], out, ng, Op::SliceCols { x, start }))
    }

    /// Gathers rows of `table`; backward scatter-adds into the gathered rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, e) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup of an empty id list"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenId { id, vocab });
            }
            out.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), e],
            out,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], ng, Op::Sum(x))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.ng(*a) {
                    let da = matmul_nt(g, self.value(*b), m, n, k);
                    accumulate(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    let db = matmul_tn(self.value(*a), g, m, k, n);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::AddRowBias(x, bias) => {
                if self.ng(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.ng(*bias) {
                    let (m, n) = self.dims(*x);
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(&mut grads[a.0], &da);
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let (m, n) = self.dims(*x);
                let y = &node.value;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain);
                if self.ng(*gain) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    accumulate(&mut grads[gain.0], &dg);
                }
                if self.ng(*bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            dx[i * n + j] =
                                rstd[i] * (dh - sum_dh / nf - xhat[i * n + j] * sum_dh_h / nf);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (t, v) = self.dims(*logits);
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = scale * probs[i * v + j];
                    }
                    dl[i * v + targets[i]] -= scale;
                }
                accumulate(&mut grads[logits.0], &dl);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.ng(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rc(&node.shape);
                let mut col = 0;
                for p in parts {
                    let (_, w) = self.dims(*p);
                    if self.ng(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        accumulate(&mut grads[p.0], &dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.dims(*x);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for (d, gv) in slot[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let (_, len) = rc(&node.shape);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                for i in 0..m {
                    for j in 0..len {
                        slot[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, e) = self.dims(*table);
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; vocab * e]);
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        slot[id * e + j] += g[pos * e + j];
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[x.0], &vec![g[0]; n]);
            }
        }
    }
}

/// Plain matrix product of two rank-2 tensors, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))
}

/// Row-wise softmax of a matrix, outside any tape.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x).expect("rank checked by caller");
    let y = tape.softmax_rows(v);
    tape.to_tensor(y)
}
