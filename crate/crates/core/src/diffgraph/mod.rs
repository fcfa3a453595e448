//! Minimal reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the handles of its parents, so parents always precede children.
//! [`Graph::backward`] walks the tape in exact reverse order and accumulates
//! gradients into the leaves that were created with `requires_grad`.
//! Gradients accumulate across calls until [`Graph::zero_grad`].
//!
//! The tape is rebuilt for every forward pass; nothing is cached between
//! passes apart from the leaf values the caller feeds in.

mod check;
mod tensor;

pub use check::{grad_check, max_rel_error};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::losses::cox::{cox_partial_likelihood, SurvivalView};

/// Scale constant of the self-normalizing activation.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-saturation constant of the self-normalizing activation.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Selu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    PairwiseDistances(Var),
    DoubleCenter(Var),
    CoxPartial {
        risks: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sqrt(a)
            | Op::Selu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::PairwiseDistances(a)
            | Op::DoubleCenter(a)
            | Op::SelectRows(a, _) => vec![*a],
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::ConcatCols(v) | Op::StackRows(v) => v.clone(),
            Op::CoxPartial { risks, .. } => vec![*risks],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of recorded operations.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that rejects non-finite values at node creation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// A graph that skips the finiteness scan.
    pub fn unchecked() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.rows(), node.value.cols(), g.clone())
                .expect("gradient shape mirrors value")
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.rows(), va.cols(), data).expect("shapes checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        Tensor::new(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa[0] {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_with(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// `sqrt(max(x, 0))`; the gradient is zero wherever the clamp is active.
    pub fn sqrt_clamped(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0).sqrt());
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, selu);
        self.push(out, Op::Selu(a), "selu")
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Per-row standardization followed by a per-column affine map.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let sa = self.shape(a);
        for p in [gain, bias] {
            if self.shape(p) != [1, sa[1]] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: sa,
                    right: self.shape(p),
                });
            }
        }
        let (m, n) = (sa[0], sa[1]);
        let x = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            let o = out.row_mut(i);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normalized[i * n + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::stack_rows(&vals)?;
        self.push(out, Op::StackRows(parts.to_vec()), "stack_rows")
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!("row {bad} selected from {} rows", s[0])));
        }
        let out = self.value(a).select_rows(idx);
        self.push(out, Op::SelectRows(a, idx.to_vec()), "select_rows")
    }

    /// Column means, `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).column_means();
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Euclidean distances between every pair of rows, `B × D → B × B`.
    pub fn pairwise_distances(&mut self, a: Var) -> Result<Var> {
        let out = pairwise_distances(self.value(a));
        self.push(out, Op::PairwiseDistances(a), "pairwise_distances")
    }

    /// `J A J` with the centering matrix `J = I − 11ᵀ/B` for square `A`.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s[0] != s[1] {
            return Err(Error::Dimension {
                op: "double_center",
                left: s,
                right: [s[1], s[0]],
            });
        }
        let out = double_center(self.value(a));
        self.push(out, Op::DoubleCenter(a), "double_center")
    }

    /// Negative Breslow partial log-likelihood of a `B × 1` (or `1 × B`)
    /// risk vector. Returns a scalar; zero when nobody has an event.
    pub fn cox_partial(&mut self, risks: Var, times: &[f64], events: &[bool]) -> Result<Var> {
        let r = self.value(risks);
        if r.len() != times.len() || r.len() != events.len() {
            return Err(Error::Contract(format!(
                "cox loss over {} risks with {} times and {} events",
                r.len(),
                times.len(),
                events.len()
            )));
        }
        let eval = cox_partial_likelihood(SurvivalView {
            risks: r.data(),
            times,
            events,
        })?;
        self.push(
            Tensor::scalar(eval.loss),
            Op::CoxPartial {
                risks,
                grad: eval.grad,
            },
            "cox_partial",
        )
    }

    /// Reverse sweep from a scalar; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(contrib),
            }
        };
        let gt = || Tensor::new(out.rows(), out.cols(), g.to_vec()).expect("adjoint shape");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gm = gt();
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(*b).transpose();
                    send(*a, gm.matmul(&bt).expect("shapes").into_data());
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.value(*a).transpose();
                    send(*b, at.matmul(&gm).expect("shapes").into_data());
                }
            }
            Op::Transpose(a) => send(*a, gt().transpose().into_data()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                let n = out.cols();
                let mut acc = vec![0.0; n];
                for chunk in g.chunks_exact(n.max(1)) {
                    acc.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                }
                send(*row, acc);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(d, y)| d * y).collect());
                send(*b, g.iter().zip(va).map(|(d, x)| d * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(d, y)| d / y).collect());
                send(
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(d, (x, y))| -d * x / (y * y))
                        .collect(),
                );
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|d| c * d).collect()),
            Op::Sqrt(a) => {
                let contrib = g
                    .iter()
                    .zip(out.data())
                    .map(|(d, y)| if *y > 0.0 { d / (2.0 * y) } else { 0.0 })
                    .collect();
                send(*a, contrib);
            }
            Op::Selu(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(d, x)| d * selu_derivative(*x)).collect());
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut contrib = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        contrib[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*a, contrib);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = (out.rows(), out.cols());
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let h = &normalized[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * h[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                send(*input, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut contrib = Vec::with_capacity(out.rows() * w);
                    for r in 0..out.rows() {
                        contrib.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    send(*p, contrib);
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    send(*p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SelectRows(a, idx) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut contrib = vec![0.0; va.len()];
                for (k, &r) in idx.iter().enumerate() {
                    contrib[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(c, d)| *c += d);
                }
                send(*a, contrib);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let scale = 1.0 / va.rows() as f64;
                let mut contrib = Vec::with_capacity(va.len());
                for _ in 0..va.rows() {
                    contrib.extend(g.iter().map(|d| d * scale));
                }
                send(*a, contrib);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                send(*a, vec![g[0]; len]);
            }
            Op::PairwiseDistances(a) => {
                let x = self.value(*a);
                let (b, d) = (x.rows(), x.cols());
                let mut contrib = vec![0.0; b * d];
                for j in 0..b {
                    for k in 0..b {
                        let dist = out.get(j, k);
                        if j == k || dist <= 0.0 {
                            continue;
                        }
                        let w = (g[j * b + k] + g[k * b + j]) / dist;
                        if w == 0.0 {
                            continue;
                        }
                        let (xj, xk) = (x.row(j), x.row(k));
                        for c in 0..d {
                            contrib[j * d + c] += w * (xj[c] - xk[c]);
                        }
                    }
                }
                send(*a, contrib);
            }
            Op::DoubleCenter(a) => send(*a, double_center(&gt()).into_data()),
            Op::CoxPartial { risks, grad } => {
                send(*risks, grad.iter().map(|d| d * g[0]).collect());
            }
        }
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
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

/// Pairwise Euclidean row distances.
pub fn pairwise_distances(x: &Tensor) -> Tensor {
    let b = x.rows();
    let mut out = Tensor::zeros(b, b);
    for j in 0..b {
        for k in (j + 1)..b {
            let d = x
                .row(j)
                .iter()
                .zip(x.row(k))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            out.set(j, k, d);
            out.set(k, j, d);
        }
    }
    out
}

/// Subtracts row means and column means, adds back the grand mean.
pub fn double_center(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let row_means: Vec<f64> = a.iter_rows().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let col_means = a.column_means().into_data();
    let grand = row_means.iter().sum::<f64>() / m as f64;
    let mut out = a.clone();
    for i in 0..m {
        let rm = row_means[i];
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v - rm - col_means[j] + grand;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2)).unwrap();
        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap()).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::column_vector(vec![3.0, 4.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 3)).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![random(3, 4, &mut rng), random(4, 2, &mut rng)];
        let err = grad_check(
            |g, p| {
                let prod = g.matmul(p[0], p[1])?;
                let sq = g.mul(prod, prod)?;
                g.sum(sq)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row_vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(Tensor::row_vector(vec![2f64.ln(), 0.0])).unwrap();
        let s = g.softmax_rows(b).unwrap();
        assert!((g.value(s).get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).get(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        let c = g.constant(Tensor::row_vector(vec![1000.0, 0.0])).unwrap();
        let s = g.softmax_rows(c).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(1, 3, 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(1, 3)).unwrap();
        let a = g.constant(Tensor::row_vector(vec![5.0, 5.0, 5.0])).unwrap();
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::filled(1, 2, 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(1, 2)).unwrap();
        let a = g.constant(Tensor::row_vector(vec![1.0, 3.0])).unwrap();
        let y = g.layer_norm(a, gain, bias, 1e-14).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![random(4, 6, &mut rng), random(1, 6, &mut rng), random(1, 6, &mut rng)];
        let weights = random(4, 6, &mut rng);
        let err = grad_check(
            |g, p| {
                let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
                let w = g.constant(weights.clone())?;
                let prod = g.mul(y, w)?;
                g.sum(prod)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn selu_values_and_gradient() {
        assert_eq!(selu(0.0), 0.0);
        assert!((selu(1.0) - 1.0507).abs() < 1e-4);
        let mut params = vec![Tensor::row_vector(vec![-2.0, -0.1, 0.1, 2.0])];
        let err = grad_check(
            |g, p| {
                let y = g.selu(p[0])?;
                g.sum(y)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![0.3, -1.2])).unwrap();
        let y = g.selu(x).unwrap();
        let sq = g.mul(y, y).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
        let a = g.constant(Tensor::scalar(1.0)).unwrap();
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let y = g.selu(x).unwrap();
        let z = g.concat_cols(&[x, y]).unwrap();
        let s = g.sum(z).unwrap();
        for (i, node) in g.nodes.iter().enumerate() {
            assert!(node.op.parents().iter().all(|p| p.0 < i));
        }
        assert!(s.0 > z.0 && z.0 > y.0);
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = vec![
            random(3, 2, &mut rng),
            random(3, 4, &mut rng),
            random(1, 6, &mut rng),
            random(2, 6, &mut rng),
        ];
        let w = random(5, 6, &mut rng);
        let err = grad_check(
            |g, p| {
                let c = g.concat_cols(&[p[0], p[1]])?;
                let c = g.add_row(c, p[2])?;
                let s = g.stack_rows(&[c, p[3]])?;
                let s = g.select_rows(s, &[4, 0, 1, 0, 2])?;
                let t = g.transpose(s)?;
                let t = g.transpose(t)?;
                let wv = g.constant(w.clone())?;
                let m = g.mul(t, wv)?;
                let sm = g.softmax_rows(m)?;
                let mean = g.mean_rows(sm)?;
                let q = g.mul(mean, mean)?;
                let d = g.sub(q, mean)?;
                g.sum(d)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn distance_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = vec![random(6, 3, &mut rng)];
        let w = random(6, 6, &mut rng);
        let err = grad_check(
            |g, p| {
                let d = g.pairwise_distances(p[0])?;
                let c = g.double_center(d)?;
                let wv = g.constant(w.clone())?;
                let m = g.mul(c, wv)?;
                let s = g.sum(m)?;
                let s2 = g.mul(s, s)?;
                let r = g.sqrt_clamped(s2)?;
                let q = g.div(r, s2)?;
                g.sum(q)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut params = vec![Tensor::row_vector(vec![0.5, -1.5, 2.0])];
        let err = grad_check(
            |g, p| {
                let s = g.scale(p[0], 3.0)?;
                g.sum(s)
            },
            &mut params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn forward_and_backward_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut g = Graph::new();
            let x = g.param(random(5, 4, &mut rng)).unwrap();
            let w = g.param(random(4, 4, &mut rng)).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.selu(h).unwrap();
            let h = g.softmax_rows(h).unwrap();
            let s = g.sum(h).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.backward(sq).unwrap();
            (g.value(sq).clone(), g.grad(x).unwrap(), g.grad(w).unwrap())
        };
        assert_eq!(run(), run());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
                proptest::collection::vec(-500.0f64..500.0, 1..8), 1..5)
            ) {
                let cols = rows[0].len();
                let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
                let mut g = Graph::new();
                let a = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
                let s = g.softmax_rows(a).unwrap();
                for r in g.value(s).iter_rows() {
                    let total: f64 = r.iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(r.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }
}
