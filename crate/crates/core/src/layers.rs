//! Transformer plumbing shared by both token-mixer families: RMSNorm,
//! SwiGLU feed-forward, rotary position embeddings, causal depthwise short
//! convolution, and the embedding / lm-head pair. All of these are graph
//! compositions, so their gradients come from the autodiff vocabulary and are
//! covered by the finite-difference checker.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// x / sqrt(mean(x^2) + eps) * gain, per trailing vector.
pub fn rmsnorm<F: Scalar>(g: &Graph<F>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    if eps < 0.0 {
        return Err(CoreError::Config("rmsnorm eps must be nonnegative".into()));
    }
    let shape = g.shape(x);
    let d = *shape.last().ok_or_else(|| CoreError::Shape {
        op: "rmsnorm",
        detail: "input must have at least one axis".into(),
    })?;
    let last = shape.len() - 1;
    let sq = g.mul(x, x)?;
    let ms = g.mul_scalar(g.sum_axis(sq, last)?, 1.0 / d as f64);
    let denom = g.sqrt(g.add_scalar(ms, eps));
    let normed = g.div(x, denom)?;
    g.mul(normed, gain)
}

/// (silu(x W_gate) ⊙ (x W_up)) W_down, no biases.
pub fn swiglu_ffn<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
) -> Result<Var> {
    let gate = g.silu(g.matmul(x, w_gate)?);
    let up = g.matmul(x, w_up)?;
    g.matmul(g.mul(gate, up)?, w_down)
}

/// Rotation angle tables for a position list: cos/sin of pos * theta_j with
/// theta_j = base^(-2j/head_dim), shape [T, head_dim/2].
pub fn rope_tables<F: Scalar>(
    positions: &[usize],
    head_dim: usize,
    base: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if head_dim % 2 != 0 {
        return Err(CoreError::Config(format!(
            "rotary embedding needs an even head dim, got {head_dim}"
        )));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = pos as f64 * theta;
            cos.push(F::from_f64(angle.cos()));
            sin.push(F::from_f64(angle.sin()));
        }
    }
    Ok((
        Tensor::from_vec(vec![positions.len(), half], cos)?,
        Tensor::from_vec(vec![positions.len(), half], sin)?,
    ))
}

/// Rotate consecutive pairs of the last axis of x: [T, head_dim] with the
/// given per-position angle tables [T, head_dim/2].
pub fn rotate_pairs<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    cos: &Tensor<F>,
    sin: &Tensor<F>,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(CoreError::Shape {
            op: "rotate_pairs",
            detail: format!("expected [T, head_dim], got {shape:?}"),
        });
    }
    let head_dim = shape[1];
    let half = head_dim / 2;
    let even: Arc<Vec<usize>> = Arc::new((0..half).map(|j| 2 * j).collect());
    let odd: Arc<Vec<usize>> = Arc::new((0..half).map(|j| 2 * j + 1).collect());

    let xe = g.index_select(x, 1, even)?;
    let xo = g.index_select(x, 1, odd)?;
    let c = g.constant(cos.clone());
    let s = g.constant(sin.clone());

    let out_e = g.sub(g.mul(xe, c)?, g.mul(xo, s)?)?;
    let out_o = g.add(g.mul(xe, s)?, g.mul(xo, c)?)?;

    // re-interleave: block [evens | odds] -> (e0, o0, e1, o1, ...)
    let stacked = g.concat(1, &[out_e, out_o])?;
    let perm: Arc<Vec<usize>> = Arc::new(
        (0..head_dim).map(|j| if j % 2 == 0 { j / 2 } else { half + j / 2 }).collect(),
    );
    g.index_select(stacked, 1, perm)
}

/// Rotary position embedding on one head: x [T, head_dim].
pub fn rope_apply<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    positions: &[usize],
    base: f64,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != positions.len() {
        return Err(CoreError::Shape {
            op: "rope_apply",
            detail: format!("x {shape:?} vs {} positions", positions.len()),
        });
    }
    let (cos, sin) = rope_tables::<F>(positions, shape[1], base)?;
    rotate_pairs(g, x, &cos, &sin)
}

/// Rotary embedding on stacked heads: x [T, num_heads, head_dim].
pub fn rope_apply_multihead<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    positions: &[usize],
    base: f64,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 {
        return Err(CoreError::Shape {
            op: "rope_apply_multihead",
            detail: format!("expected [T, heads, head_dim], got {shape:?}"),
        });
    }
    let (t_len, heads, head_dim) = (shape[0], shape[1], shape[2]);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let xh = g.reshape(g.narrow(x, 1, h, 1)?, vec![t_len, head_dim])?;
        let rot = rope_apply(g, xh, positions, base)?;
        outs.push(g.reshape(rot, vec![t_len, 1, head_dim])?);
    }
    g.concat(1, &outs)
}

/// Causal depthwise convolution on the time axis; x [T, d], kernel [d, k].
pub fn short_conv<F: Scalar>(g: &Graph<F>, x: Var, kernel: Var) -> Result<Var> {
    g.conv1d_depthwise(x, kernel)
}

/// Row lookup: table [V, d], ids -> [T, d].
pub fn embed<F: Scalar>(g: &Graph<F>, table: Var, ids: &[usize]) -> Result<Var> {
    let vocab = g.shape(table)[0];
    for &id in ids {
        if id >= vocab {
            return Err(CoreError::Input(format!("token id {id} out of range {vocab}")));
        }
    }
    g.index_select(table, 0, Arc::new(ids.to_vec()))
}

/// logits = h · tableᵀ; `table` is either the embedding (weight tying) or a
/// separate head matrix, both stored [V, d].
pub fn lm_head<F: Scalar>(g: &Graph<F>, h: Var, table: Var) -> Result<Var> {
    let tt = g.transpose2d(table)?;
    g.matmul(h, tt)
}

/// Mean cross-entropy of next-token prediction: logits [T, V], targets [T].
/// Uses a detached row max inside logsumexp; the expression is invariant to
/// the shift, so detaching is exact.
pub fn cross_entropy_mean<F: Scalar>(g: &Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(CoreError::Shape {
            op: "cross_entropy_mean",
            detail: format!("logits {shape:?} vs {} targets", targets.len()),
        });
    }
    let t_len = shape[0];
    let m = g.detach(g.max_axis(logits, 1)?);
    let shifted = g.sub(logits, m)?;
    let sum_exp = g.sum_axis(g.exp(shifted), 1)?;
    let lse = g.add(g.log(sum_exp), m)?;
    let lse_flat = g.reshape(lse, vec![t_len])?;
    let picked = g.take_per_row(logits, Arc::new(targets.to_vec()))?;
    Ok(g.mean_all(g.sub(lse_flat, picked)?))
}
