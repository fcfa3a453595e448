//! Single-head scaled dot-product attention.

use crate::diffgraph::{softmax_in_place, Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// Row-stochastic `N_q × N_kv` weights.
    pub weights: Tensor,
    pub output: Tensor,
}

/// `softmax((Z_q W_Q)(Z_kv W_K)ᵀ / sqrt(d)) (Z_kv W_V)`. Self-attention is the
/// case `z_q == z_kv`.
pub fn attention(z_q: &Tensor, z_kv: &Tensor, w: [&Tensor; 3], scale: f64) -> Result<Attention> {
    let q = z_q.matmul(w[0])?;
    let k = z_kv.matmul(w[1])?;
    let v = z_kv.matmul(w[2])?;
    let mut weights = q.matmul(&k.transpose())?;
    let s = 1.0 / scale.sqrt();
    weights.data_mut().iter_mut().for_each(|x| *x *= s);
    for r in 0..weights.rows() {
        softmax_in_place(weights.row_mut(r));
    }
    let output = weights.matmul(&v)?;
    Ok(Attention { weights, output })
}

pub fn attention_var(g: &mut Graph, z_q: Var, z_kv: Var, w: [Var; 3], scale: f64) -> Result<Var> {
    let q = g.matmul(z_q, w[0])?;
    let k = g.matmul(z_kv, w[1])?;
    let v = g.matmul(z_kv, w[2])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / scale.sqrt())?;
    let a = g.softmax_rows(scores)?;
    g.matmul(a, v)
}
