//! Scaled dot-product attention, `softmax(Q·Kᵀ/√d_k)·V`, with its backward pass.
//!
//! Operates on one sample at a time: `Q` is `n_q × d_k`, `K` is `n_k × d_k`,
//! `V` is `n_k × d_v`. Callers flatten the `n_q × d_v` output themselves
//! (sequence-major) when they need a `B × (n_q·d_v)` feature block.

use super::params::Tensor2;
use crate::error::{Error, Result};

/// Forward result; `weights` are the row-stochastic attention probabilities.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor2,
    pub weights: Tensor2,
}

/// Gradients with respect to the three inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub q: Tensor2,
    pub k: Tensor2,
    pub v: Tensor2,
}

pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, d_k: usize) -> Result<Tensor2> {
    attention_forward(q, k, v, d_k).map(|a| a.output)
}

pub fn attention_forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, d_k: usize) -> Result<AttentionOutput> {
    if q.ncols() != d_k {
        return Err(Error::dim("attention: Q columns", d_k, q.ncols()));
    }
    if k.ncols() != d_k {
        return Err(Error::dim("attention: K columns", d_k, k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::dim("attention: K/V rows", k.nrows(), v.nrows()));
    }
    if k.nrows() == 0 {
        return Err(Error::dim("attention: key count", ">= 1", 0));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut weights = q.dot(&k.t());
    weights.mapv_inplace(|s| s * scale);
    for mut row in weights.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    let output = weights.dot(v);
    Ok(AttentionOutput { output, weights })
}

/// Backpropagates `grad_out` (dL/d output) through a forward pass that produced `weights`.
pub fn attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    weights: &Tensor2,
    grad_out: &Tensor2,
    d_k: usize,
) -> AttentionGrads {
    let scale = 1.0 / (d_k as f64).sqrt();
    let grad_v = weights.t().dot(grad_out);
    let grad_w = grad_out.dot(&v.t());
    // softmax Jacobian, row by row: dS = A ⊙ (dA − Σ_j dA_j A_j)
    let mut grad_s = grad_w;
    for (mut g_row, a_row) in grad_s.rows_mut().into_iter().zip(weights.rows()) {
        let dot: f64 = g_row.iter().zip(a_row.iter()).map(|(g, a)| g * a).sum();
        g_row.zip_mut_with(&a_row, |g, &a| *g = a * (*g - dot));
    }
    grad_s.mapv_inplace(|g| g * scale);
    AttentionGrads {
        q: grad_s.dot(k),
        k: grad_s.t().dot(q),
        v: grad_v,
    }
}
