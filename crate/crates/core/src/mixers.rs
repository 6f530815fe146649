//! Token mixers: causal softmax attention, sliding-window attention, the
//! mLSTM matrix-memory cell (parallel training form and recurrent step form),
//! Hedgehog feature maps, and the branch combination rules.
//!
//! The parallel mLSTM builds the full gate-weighted score matrix
//! D[t,s] = F_t - F_s + i~_s (F = cumulative log forget gates), stabilizes it
//! with its row max m, and normalizes retrieval by max(|row sum|, exp(-m)).
//! The row max equals the running max of the recurrent form by induction, and
//! flooring at exp(-m) makes the stabilized expression algebraically equal to
//! the unstabilized retrieval with its floor at 1, so folding the step form
//! over time computes the same function. The expression is invariant to m, so
//! the stabilizer is detached from the gradient.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layers::rope_apply;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive mask value; exp(MASK_NEG - anything reasonable) is exactly zero
/// in both f32 and f64, so masked positions carry no weight and no gradient.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    SelfAttention,
    Mlstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwaMode {
    Off,
    FixedHalf,
    DynMod,
    DynModBounded,
}

#[derive(Debug, Clone)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub swa: SwaMode,
    pub swa_window: usize,
    pub hedgehog: bool,
    /// 0 selects the default head_dim / 2 (phi output dim == head_dim).
    pub hedgehog_feature_dim: usize,
    pub short_conv: bool,
    pub short_conv_kernel: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            kind: MixerKind::Mlstm,
            swa: SwaMode::Off,
            swa_window: 64,
            hedgehog: false,
            hedgehog_feature_dim: 0,
            short_conv: false,
            short_conv_kernel: 4,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.swa != SwaMode::Off && self.kind != MixerKind::Mlstm {
            return Err(CoreError::Config(
                "sliding window attention is combined with the mLSTM mixer only".into(),
            ));
        }
        if self.swa != SwaMode::Off && self.swa_window < 1 {
            return Err(CoreError::Config("swa window must be >= 1".into()));
        }
        if self.short_conv && self.short_conv_kernel < 1 {
            return Err(CoreError::Config("short conv kernel must be >= 1".into()));
        }
        if self.hedgehog && self.kind != MixerKind::Mlstm {
            return Err(CoreError::Config("hedgehog feature maps apply to the mLSTM mixer".into()));
        }
        Ok(())
    }

    pub fn hedgehog_dim(&self, head_dim: usize) -> usize {
        if self.hedgehog_feature_dim > 0 {
            self.hedgehog_feature_dim
        } else {
            (head_dim / 2).max(1)
        }
    }
}

// -- masks ---------------------------------------------------------------------

fn causal_mask_tensor<F: Scalar>(t: usize) -> Tensor<F> {
    let neg = F::from_f64(MASK_NEG);
    let mut data = vec![F::zero(); t * t];
    for row in 0..t {
        for col in row + 1..t {
            data[row * t + col] = neg;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("sized")
}

/// Position t attends to s in [max(0, t-w+1), t].
fn window_mask_tensor<F: Scalar>(t: usize, w: usize) -> Tensor<F> {
    let neg = F::from_f64(MASK_NEG);
    let mut data = vec![F::zero(); t * t];
    for row in 0..t {
        for col in 0..t {
            let lo = row.saturating_sub(w - 1);
            if col < lo || col > row {
                data[row * t + col] = neg;
            }
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("sized")
}

// -- softmax attention -----------------------------------------------------------

/// One head of masked softmax attention; q, k, v are [T, d_h].
fn attention_head<F: Scalar>(
    g: &Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Tensor<F>,
) -> Result<Var> {
    let d_h = g.shape(q)[1];
    let scores = g.matmul(q, g.transpose2d(k)?)?;
    let scaled = g.mul_scalar(scores, 1.0 / (d_h as f64).sqrt());
    let masked = g.add(scaled, g.constant(mask.clone()))?;
    let attn = g.softmax(masked, 1)?;
    g.matmul(attn, v)
}

fn split_head<F: Scalar>(g: &Graph<F>, x: Var, head: usize) -> Result<Var> {
    let shape = g.shape(x);
    let (t, d_h) = (shape[0], shape[2]);
    g.reshape(g.narrow(x, 1, head, 1)?, vec![t, d_h])
}

fn masked_attention<F: Scalar>(
    g: &Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Tensor<F>,
) -> Result<Var> {
    let shape = g.shape(q);
    if shape.len() != 3 || g.shape(k) != shape || g.shape(v) != shape {
        return Err(CoreError::Shape {
            op: "attention",
            detail: format!("expected equal [T, heads, d_h] inputs, got q {shape:?}"),
        });
    }
    let (t, heads, d_h) = (shape[0], shape[1], shape[2]);
    if t == 0 {
        return Ok(v);
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = split_head(g, q, h)?;
        let kh = split_head(g, k, h)?;
        let vh = split_head(g, v, h)?;
        let oh = attention_head(g, qh, kh, vh, &mask)?;
        outs.push(g.reshape(oh, vec![t, 1, d_h])?);
    }
    g.concat(1, &outs)
}

/// Causal softmax attention over stacked heads [T, heads, d_h]
/// (rotary embedding, if any, is applied by the caller).
pub fn causal_attention<F: Scalar>(g: &Graph<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    let t = g.shape(q)[0];
    masked_attention(g, q, k, v, causal_mask_tensor(t))
}

/// Sliding-window attention: like causal attention but restricted to the
/// most recent `window` positions.
pub fn swa_attention<F: Scalar>(
    g: &Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    window: usize,
) -> Result<Var> {
    if window < 1 {
        return Err(CoreError::Config("swa window must be >= 1".into()));
    }
    let t = g.shape(q)[0];
    masked_attention(g, q, k, v, window_mask_tensor(t, window))
}

// -- hedgehog feature map -----------------------------------------------------------

/// phi(x) = normalized concat(exp(x W), exp(-x W)): strictly positive,
/// sums to 1 along the feature axis. The max-subtraction stabilizer is the
/// softmax's own; the normalization makes it exact.
pub fn hedgehog_map<F: Scalar>(g: &Graph<F>, x: Var, w_phi: Var) -> Result<Var> {
    let u = g.matmul(x, w_phi)?;
    let stacked = g.concat(1, &[u, g.neg(u)])?;
    g.softmax(stacked, 1)
}

// -- mLSTM parallel form ---------------------------------------------------------

/// One head of the parallel mLSTM. q/k are post-feature-map [T, key_dim],
/// v is [T, d_h]; itilde/ftilde/otilde are per-position gate pre-activations
/// [T, 1]. Returns the o-gated retrieval [T, d_h].
fn mlstm_head_parallel<F: Scalar>(
    g: &Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    itilde: Var,
    ftilde: Var,
    otilde: Var,
) -> Result<Var> {
    let t = g.shape(q)[0];
    let key_dim = g.shape(q)[1];
    let scale = 1.0 / (key_dim as f64).sqrt();

    let scores = g.mul_scalar(g.matmul(q, g.transpose2d(k)?)?, scale);

    let f_cum = g.cumsum(ftilde, 0)?; // [T,1]
    let f_row = g.reshape(f_cum, vec![1, t])?;
    let i_row = g.reshape(itilde, vec![1, t])?;
    let decay = g.add(g.sub(f_cum, f_row)?, i_row)?; // [T,T]
    let masked = g.add(decay, g.constant(causal_mask_tensor(t)))?;

    // Row max equals the recurrent running max; the retrieval is invariant to
    // it, so it carries no gradient.
    let m = g.detach(g.max_axis(masked, 1)?); // [T,1]
    let weights = g.exp(g.sub(masked, m)?);
    let gated = g.mul(weights, scores)?;

    let numer = g.matmul(gated, v)?; // [T, d_h]
    let row_sum = g.sum_axis(gated, 1)?; // [T,1]
    let floor = g.exp(g.neg(m));
    let denom = g.maximum(
        g.maximum(g.abs(row_sum), floor)?,
        g.constant_scalar(F::min_positive_value().as_f64()),
    )?;
    let retrieved = g.div(numer, denom)?;
    g.mul(retrieved, g.sigmoid(otilde))
}

/// Learned projections for the mLSTM mixer (graph variables).
#[derive(Debug, Clone, Copy)]
pub struct MlstmProjVars {
    /// [d_model, d_model] each.
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    /// [d_model, num_heads] each: per-head scalar gate pre-activations.
    pub w_gate_i: Var,
    pub w_gate_f: Var,
    pub w_gate_o: Var,
}

/// mLSTM heads without the output projection: projections, optional causal
/// conv on q/k, optional hedgehog map, stabilized matrix-memory retrieval,
/// head concatenation. Returns the concatenated heads plus the (post-conv)
/// q/k/v projections for reuse by the SWA branch.
fn mlstm_heads<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    proj: &MlstmProjVars,
    num_heads: usize,
    conv_q: Option<Var>,
    conv_k: Option<Var>,
    w_phi: Option<Var>,
) -> Result<(Var, Var, Var, Var)> {
    let d_model = g.shape(x)[1];
    let d_h = d_model / num_heads;

    let mut q_all = g.matmul(x, proj.w_q)?;
    let mut k_all = g.matmul(x, proj.w_k)?;
    let v_all = g.matmul(x, proj.w_v)?;
    if let Some(cq) = conv_q {
        q_all = g.conv1d_depthwise(q_all, cq)?;
    }
    if let Some(ck) = conv_k {
        k_all = g.conv1d_depthwise(k_all, ck)?;
    }

    let i_pre = g.matmul(x, proj.w_gate_i)?; // [T, heads]
    let f_pre = g.matmul(x, proj.w_gate_f)?;
    let o_pre = g.matmul(x, proj.w_gate_o)?;

    let mut outs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let mut qh = g.narrow(q_all, 1, h * d_h, d_h)?;
        let mut kh = g.narrow(k_all, 1, h * d_h, d_h)?;
        let vh = g.narrow(v_all, 1, h * d_h, d_h)?;
        if let Some(w) = w_phi {
            qh = hedgehog_map(g, qh, w)?;
            kh = hedgehog_map(g, kh, w)?;
        }
        let ih = g.narrow(i_pre, 1, h, 1)?;
        let fh = g.narrow(f_pre, 1, h, 1)?;
        let oh = g.narrow(o_pre, 1, h, 1)?;
        outs.push(mlstm_head_parallel(g, qh, kh, vh, ih, fh, oh)?);
    }
    let heads = g.concat(1, &outs)?;
    Ok((heads, q_all, k_all, v_all))
}

/// The full parallel mLSTM mixer (spec form): projections, stabilized
/// retrieval, head concatenation, output projection. Equals folding
/// `mlstm_step` over the sequence.
pub fn mlstm_parallel<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    proj: &MlstmProjVars,
    num_heads: usize,
    w_phi: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(CoreError::Shape {
            op: "mlstm_parallel",
            detail: format!("expected [T, d_model], got {shape:?}"),
        });
    }
    if shape[0] == 0 {
        return Ok(x);
    }
    let (heads, _, _, _) = mlstm_heads(g, x, proj, num_heads, None, None, w_phi)?;
    g.matmul(heads, proj.w_out)
}

// -- combination rules -----------------------------------------------------------

/// h_LA/2 + h_SWA/2, h_LA + alpha * h_SWA, or h_LA + tanh(alpha) * h_SWA.
pub fn combine<F: Scalar>(
    g: &Graph<F>,
    h_la: Var,
    h_swa: Var,
    mode: SwaMode,
    alpha: Option<Var>,
) -> Result<Var> {
    if g.shape(h_la) != g.shape(h_swa) {
        return Err(CoreError::Shape {
            op: "combine",
            detail: format!("{:?} vs {:?}", g.shape(h_la), g.shape(h_swa)),
        });
    }
    match mode {
        SwaMode::Off => Err(CoreError::Contract("combine called with swa mode off".into())),
        SwaMode::FixedHalf => Ok(g.mul_scalar(g.add(h_la, h_swa)?, 0.5)),
        SwaMode::DynMod => {
            let alpha = alpha.ok_or_else(|| CoreError::Contract("DynMod needs alpha".into()))?;
            g.add(h_la, g.mul(h_swa, alpha)?)
        }
        SwaMode::DynModBounded => {
            let alpha = alpha.ok_or_else(|| CoreError::Contract("DynMod needs alpha".into()))?;
            g.add(h_la, g.mul(h_swa, g.tanh(alpha))?)
        }
    }
}

// -- assembled mixer ---------------------------------------------------------------

/// Graph variables for one mixer instance. Optional entries follow the
/// mixer configuration.
#[derive(Debug, Clone)]
pub struct MixerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub gates: Option<(Var, Var, Var)>, // (w_i, w_f, w_o), mLSTM only
    pub conv_q: Option<Var>,
    pub conv_k: Option<Var>,
    pub w_phi: Option<Var>,
    pub alpha: Option<Var>,
    /// Separate SWA projections (w_q, w_k, w_v) when configured.
    pub swa_proj: Option<(Var, Var, Var)>,
}

/// Full token mixer: self-attention, or mLSTM optionally combined with a
/// sliding-window attention branch (shared projections unless separate ones
/// are provided). The combination happens before the output projection.
pub fn mixer_forward<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    cfg: &MixerConfig,
    vars: &MixerVars,
    num_heads: usize,
    rope_base: f64,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x);
    let (t, d_model) = (shape[0], shape[1]);
    if t == 0 {
        return Ok(x);
    }
    let d_h = d_model / num_heads;
    let positions: Vec<usize> = (0..t).collect();

    match cfg.kind {
        MixerKind::SelfAttention => {
            let mut q_all = g.matmul(x, vars.w_q)?;
            let mut k_all = g.matmul(x, vars.w_k)?;
            let v_all = g.matmul(x, vars.w_v)?;
            if cfg.short_conv {
                q_all = g.conv1d_depthwise(q_all, vars.conv_q.expect("conv weights"))?;
                k_all = g.conv1d_depthwise(k_all, vars.conv_k.expect("conv weights"))?;
            }
            let mask = causal_mask_tensor(t);
            let mut outs = Vec::with_capacity(num_heads);
            for h in 0..num_heads {
                let qh = g.narrow(q_all, 1, h * d_h, d_h)?;
                let kh = g.narrow(k_all, 1, h * d_h, d_h)?;
                let vh = g.narrow(v_all, 1, h * d_h, d_h)?;
                let qr = rope_apply(g, qh, &positions, rope_base)?;
                let kr = rope_apply(g, kh, &positions, rope_base)?;
                outs.push(attention_head(g, qr, kr, vh, &mask)?);
            }
            let heads = g.concat(1, &outs)?;
            g.matmul(heads, vars.w_out)
        }
        MixerKind::Mlstm => {
            let (w_i, w_f, w_o) =
                vars.gates.ok_or_else(|| CoreError::Contract("mLSTM needs gate weights".into()))?;
            let proj = MlstmProjVars {
                w_q: vars.w_q,
                w_k: vars.w_k,
                w_v: vars.w_v,
                w_out: vars.w_out,
                w_gate_i: w_i,
                w_gate_f: w_f,
                w_gate_o: w_o,
            };
            let conv_q = if cfg.short_conv { vars.conv_q } else { None };
            let conv_k = if cfg.short_conv { vars.conv_k } else { None };
            let w_phi = if cfg.hedgehog { vars.w_phi } else { None };
            let (la_heads, q_all, k_all, v_all) =
                mlstm_heads(g, x, &proj, num_heads, conv_q, conv_k, w_phi)?;

            let mixed = if cfg.swa == SwaMode::Off {
                la_heads
            } else {
                // SWA branch: shared q/k/v (post conv) unless separate
                // projections are configured; rotary embedding on q/k.
                let (sq, sk, sv) = match vars.swa_proj {
                    Some((wq, wk, wv)) => {
                        (g.matmul(x, wq)?, g.matmul(x, wk)?, g.matmul(x, wv)?)
                    }
                    None => (q_all, k_all, v_all),
                };
                let mask = window_mask_tensor(t, cfg.swa_window);
                let mut outs = Vec::with_capacity(num_heads);
                for h in 0..num_heads {
                    let qh = g.narrow(sq, 1, h * d_h, d_h)?;
                    let kh = g.narrow(sk, 1, h * d_h, d_h)?;
                    let vh = g.narrow(sv, 1, h * d_h, d_h)?;
                    let qr = rope_apply(g, qh, &positions, rope_base)?;
                    let kr = rope_apply(g, kh, &positions, rope_base)?;
                    outs.push(attention_head(g, qr, kr, vh, &mask)?);
                }
                let swa_heads = g.concat(1, &outs)?;
                combine(g, la_heads, swa_heads, cfg.swa, vars.alpha)?
            };
            g.matmul(mixed, vars.w_out)
        }
    }
}

// -- recurrent step form -------------------------------------------------------------

/// Per-head recurrent state: stabilized matrix memory, normalizer, and the
/// running log-space maximum.
#[derive(Debug, Clone)]
pub struct MlstmState<F: Scalar> {
    /// [d_h, key_dim] per head.
    pub c: Vec<Tensor<F>>,
    /// [key_dim] per head.
    pub n: Vec<Tensor<F>>,
    /// Running max of log-gate quantities per head; starts at -inf.
    pub m: Vec<F>,
    pub step: usize,
}

impl<F: Scalar> MlstmState<F> {
    pub fn new(num_heads: usize, d_h: usize, key_dim: usize) -> Self {
        Self {
            c: (0..num_heads).map(|_| Tensor::zeros(&[d_h, key_dim])).collect(),
            n: (0..num_heads).map(|_| Tensor::zeros(&[key_dim])).collect(),
            m: vec![F::neg_infinity(); num_heads],
            step: 0,
        }
    }
}

/// Plain-tensor weights for the step form (no conv: the step form is the
/// mixer core used as the parallel form's oracle and for decoding).
#[derive(Debug, Clone)]
pub struct MlstmWeights<F: Scalar> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_out: Tensor<F>,
    pub w_gate_i: Tensor<F>,
    pub w_gate_f: Tensor<F>,
    pub w_gate_o: Tensor<F>,
    pub w_phi: Option<Tensor<F>>,
    pub num_heads: usize,
}

impl<F: Scalar> MlstmWeights<F> {
    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn key_dim(&self) -> usize {
        match &self.w_phi {
            Some(w) => 2 * w.shape()[1],
            None => self.head_dim(),
        }
    }

    pub fn fresh_state(&self) -> MlstmState<F> {
        MlstmState::new(self.num_heads, self.head_dim(), self.key_dim())
    }
}

fn phi_vector<F: Scalar>(x: &[F], w_phi: &Tensor<F>) -> Vec<F> {
    let (d, f) = (w_phi.shape()[0], w_phi.shape()[1]);
    debug_assert_eq!(x.len(), d);
    let mut u = vec![F::zero(); f];
    for (i, &xi) in x.iter().enumerate() {
        for (j, uj) in u.iter_mut().enumerate() {
            *uj += xi * w_phi.data()[i * f + j];
        }
    }
    let mut z: Vec<F> = u.iter().copied().chain(u.iter().map(|&v| -v)).collect();
    let mx = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for v in z.iter_mut() {
        *v = (*v - mx).exp();
        denom += *v;
    }
    for v in z.iter_mut() {
        *v = *v / denom;
    }
    z
}

fn project_row<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Vec<F> {
    // x [d], w [d, out] -> [out]
    let (d, out_dim) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![F::zero(); out_dim];
    for i in 0..d {
        let xi = x.data()[i];
        if xi != F::zero() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += xi * w.data()[i * out_dim + j];
            }
        }
    }
    y
}

/// One recurrent mLSTM step: x_t [d_model] -> h_t [d_model], updating the
/// stabilized state in place. Gates are exponential with a shared running-max
/// stabilizer; retrieval divides by max(|<n, q>|, exp(-m)).
pub fn mlstm_step<F: Scalar>(
    x_t: &Tensor<F>,
    w: &MlstmWeights<F>,
    state: &mut MlstmState<F>,
) -> Result<Tensor<F>> {
    let d_model = w.d_model();
    if x_t.shape() != [d_model] {
        return Err(CoreError::Shape {
            op: "mlstm_step",
            detail: format!("x {:?} vs d_model {d_model}", x_t.shape()),
        });
    }
    let heads = w.num_heads;
    let d_h = w.head_dim();
    let key_dim = w.key_dim();
    let scale = F::from_f64(1.0 / (key_dim as f64).sqrt());

    let q_all = project_row(x_t, &w.w_q);
    let k_all = project_row(x_t, &w.w_k);
    let v_all = project_row(x_t, &w.w_v);
    let i_pre = project_row(x_t, &w.w_gate_i);
    let f_pre = project_row(x_t, &w.w_gate_f);
    let o_pre = project_row(x_t, &w.w_gate_o);

    state.step += 1;
    let mut concat = vec![F::zero(); d_model];
    for h in 0..heads {
        let q_raw = &q_all[h * d_h..(h + 1) * d_h];
        let k_raw = &k_all[h * d_h..(h + 1) * d_h];
        let v = &v_all[h * d_h..(h + 1) * d_h];
        let (q, k): (Vec<F>, Vec<F>) = match &w.w_phi {
            Some(wp) => (phi_vector(q_raw, wp), phi_vector(k_raw, wp)),
            None => (q_raw.to_vec(), k_raw.to_vec()),
        };

        let itilde = i_pre[h];
        let ftilde = f_pre[h];
        let m_prev = state.m[h];
        let m_new = (ftilde + m_prev).max(itilde);
        let i_gate = (itilde - m_new).exp();
        let f_gate = if m_prev == F::neg_infinity() {
            F::zero()
        } else {
            (ftilde + m_prev - m_new).exp()
        };

        // C <- f C + i v k^T ; n <- f n + i k
        let c_old = state.c[h].data();
        let n_old = state.n[h].data();
        let mut c_new = vec![F::zero(); d_h * key_dim];
        for r in 0..d_h {
            for col in 0..key_dim {
                c_new[r * key_dim + col] =
                    f_gate * c_old[r * key_dim + col] + i_gate * v[r] * k[col];
            }
        }
        let mut n_new = vec![F::zero(); key_dim];
        for col in 0..key_dim {
            n_new[col] = f_gate * n_old[col] + i_gate * k[col];
        }

        // retrieval with scaled query
        let mut dot = F::zero();
        let mut numer = vec![F::zero(); d_h];
        for col in 0..key_dim {
            let qs = q[col] * scale;
            dot += n_new[col] * qs;
            for (r, nr) in numer.iter_mut().enumerate() {
                *nr += c_new[r * key_dim + col] * qs;
            }
        }
        let denom = dot.abs().max((-m_new).exp()).max(F::min_positive_value());
        let o_gate = F::one() / (F::one() + (-o_pre[h]).exp());
        for r in 0..d_h {
            concat[h * d_h + r] = o_gate * numer[r] / denom;
        }

        let c_t = Tensor::from_vec(vec![d_h, key_dim], c_new)?;
        let n_t = Tensor::from_vec(vec![key_dim], n_new)?;
        if !c_t.all_finite() || !n_t.all_finite() || !m_new.is_finite() {
            return Err(CoreError::StateDivergence {
                step: state.step,
                detail: format!("head {h} produced a non-finite state"),
            });
        }
        state.c[h] = c_t;
        state.n[h] = n_t;
        state.m[h] = m_new;
    }

    let h_concat = Tensor::from_vec(vec![d_model], concat)?;
    let out = project_row(&h_concat, &w.w_out);
    let out = Tensor::from_vec(vec![d_model], out)?;
    if !out.all_finite() {
        return Err(CoreError::StateDivergence {
            step: state.step,
            detail: "non-finite mixer output".into(),
        });
    }
    Ok(out)
}

/// Fold the step form over a sequence [T, d_model]. This is the reference
/// the parallel form is checked against.
pub fn mlstm_fold<F: Scalar>(xs: &Tensor<F>, w: &MlstmWeights<F>) -> Result<Tensor<F>> {
    if xs.ndim() != 2 {
        return Err(CoreError::Shape {
            op: "mlstm_fold",
            detail: format!("expected [T, d_model], got {:?}", xs.shape()),
        });
    }
    let (t_len, d_model) = (xs.shape()[0], xs.shape()[1]);
    let mut state = w.fresh_state();
    let mut out = Vec::with_capacity(t_len * d_model);
    for t in 0..t_len {
        let x_t = xs.narrow(0, t, 1)?.reshape(vec![d_model])?;
        let h_t = mlstm_step(&x_t, w, &mut state)?;
        out.extend_from_slice(h_t.data());
    }
    Tensor::from_vec(vec![t_len, d_model], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), data).unwrap()
    }

    fn stack_heads(g: &Graph<f64>, t: usize, heads: usize, d_h: usize, rng: &mut SeededRng) -> Var {
        g.leaf(rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0))
    }

    #[test]
    fn causal_attention_single_token_returns_value() {
        let mut rng = SeededRng::new(3);
        let g = Graph::new();
        let q = stack_heads(&g, 1, 2, 4, &mut rng);
        let k = stack_heads(&g, 1, 2, 4, &mut rng);
        let v = stack_heads(&g, 1, 2, 4, &mut rng);
        let out = causal_attention(&g, q, k, v).unwrap();
        let (ov, vv) = (g.value(out), g.value(v));
        for (a, b) in ov.data().iter().zip(vv.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_identical_keys_average_prefix() {
        let g = Graph::new();
        let t = 4;
        let q = g.leaf(Tensor::ones(&[t, 1, 2]));
        let k = g.leaf(Tensor::ones(&[t, 1, 2]));
        let v = g.leaf(t64(&[t, 1, 2], &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]));
        let out = g.value(causal_attention(&g, q, k, v).unwrap());
        for row in 0..t {
            let want = (1..=row + 1).map(|x| x as f64).sum::<f64>() / (row + 1) as f64;
            assert!((out.at(&[row, 0, 0]) - want).abs() < 1e-12, "row {row}");
        }
    }

    /// Independent double-loop reference for masked attention.
    fn attention_loop_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        window: Option<usize>,
    ) -> Vec<f64> {
        let (t, heads, d_h) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let mut out = vec![0.0; t * heads * d_h];
        for h in 0..heads {
            for ti in 0..t {
                let lo = match window {
                    Some(w) => ti.saturating_sub(w - 1),
                    None => 0,
                };
                let mut weights = Vec::new();
                for s in lo..=ti {
                    let mut dot = 0.0;
                    for d in 0..d_h {
                        dot += q.at(&[ti, h, d]) * k.at(&[s, h, d]);
                    }
                    weights.push(dot / (d_h as f64).sqrt());
                }
                let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = weights.iter().map(|w| (w - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for d in 0..d_h {
                    let mut acc = 0.0;
                    for (wi, s) in (lo..=ti).enumerate() {
                        acc += exps[wi] / denom * v.at(&[s, h, d]);
                    }
                    out[(ti * heads + h) * d_h + d] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn causal_attention_matches_loop_oracle() {
        let mut rng = SeededRng::new(17);
        let (t, heads, d_h) = (3, 1, 2);
        let qt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let kt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let vt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let g = Graph::new();
        let out = g.value(
            causal_attention(&g, g.leaf(qt.clone()), g.leaf(kt.clone()), g.leaf(vt.clone()))
                .unwrap(),
        );
        let want = attention_loop_oracle(&qt, &kt, &vt, None);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn swa_full_window_equals_causal() {
        let mut rng = SeededRng::new(29);
        let (t, heads, d_h) = (6, 2, 4);
        let g = Graph::new();
        let q = stack_heads(&g, t, heads, d_h, &mut rng);
        let k = stack_heads(&g, t, heads, d_h, &mut rng);
        let v = stack_heads(&g, t, heads, d_h, &mut rng);
        let full = g.value(causal_attention(&g, q, k, v).unwrap());
        for w in [t, t + 1, t + 100] {
            let swa = g.value(swa_attention(&g, q, k, v, w).unwrap());
            for (a, b) in swa.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swa_window_one_returns_value() {
        let mut rng = SeededRng::new(31);
        let g = Graph::new();
        let q = stack_heads(&g, 5, 1, 2, &mut rng);
        let k = stack_heads(&g, 5, 1, 2, &mut rng);
        let v = stack_heads(&g, 5, 1, 2, &mut rng);
        let out = g.value(swa_attention(&g, q, k, v, 1).unwrap());
        for (a, b) in out.data().iter().zip(g.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn swa_matches_masked_loop_oracle() {
        let mut rng = SeededRng::new(37);
        let (t, heads, d_h) = (5, 1, 2);
        let qt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let kt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let vt: Tensor<f64> = rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0);
        let g = Graph::new();
        let out = g.value(
            swa_attention(&g, g.leaf(qt.clone()), g.leaf(kt.clone()), g.leaf(vt.clone()), 2)
                .unwrap(),
        );
        let want = attention_loop_oracle(&qt, &kt, &vt, Some(2));
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn swa_rejects_zero_window() {
        let g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::zeros(&[2, 1, 2]));
        assert!(swa_attention(&g, q, q, q, 0).is_err());
    }

    #[test]
    fn hedgehog_zero_input_is_uniform() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]));
        let w = g.leaf(Tensor::ones(&[4, 3]));
        let out = g.value(hedgehog_map(&g, x, w).unwrap());
        assert_eq!(out.shape(), &[1, 6]);
        for v in out.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hedgehog_positive_and_normalized() {
        let mut rng = SeededRng::new(5);
        let g = Graph::new();
        let x = g.leaf(rng.normal_tensor::<f64>(&[7, 4], 0.0, 3.0));
        let w = g.leaf(rng.normal_tensor::<f64>(&[4, 2], 0.0, 1.0));
        let out = g.value(hedgehog_map(&g, x, w).unwrap());
        for row in 0..7 {
            let mut sum = 0.0;
            for j in 0..4 {
                let v = out.at(&[row, j]);
                assert!(v > 0.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hedgehog_scalar_oracle() {
        // featureDim=2, d_h=2, fixed W and x, evaluated by hand arithmetic
        let g = Graph::new();
        let x = g.leaf(t64(&[1, 2], &[1.0, -0.5]));
        let w = g.leaf(t64(&[2, 2], &[0.3, -0.2, 0.1, 0.4]));
        // u = [0.3 - 0.05, -0.2 - 0.2] = [0.25, -0.4]
        let u = [0.25f64, -0.4];
        let z = [u[0], u[1], -u[0], -u[1]];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let out = g.value(hedgehog_map(&g, x, w).unwrap());
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_weights(
        d_model: usize,
        heads: usize,
        hedgehog_dim: Option<usize>,
        rng: &mut SeededRng,
    ) -> MlstmWeights<f64> {
        let d_h = d_model / heads;
        MlstmWeights {
            w_q: rng.normal_tensor(&[d_model, d_model], 0.0, 0.4),
            w_k: rng.normal_tensor(&[d_model, d_model], 0.0, 0.4),
            w_v: rng.normal_tensor(&[d_model, d_model], 0.0, 0.4),
            w_out: rng.normal_tensor(&[d_model, d_model], 0.0, 0.4),
            w_gate_i: rng.normal_tensor(&[d_model, heads], 0.0, 0.4),
            w_gate_f: rng.normal_tensor(&[d_model, heads], 0.0, 0.4),
            w_gate_o: rng.normal_tensor(&[d_model, heads], 0.0, 0.4),
            w_phi: hedgehog_dim.map(|f| rng.normal_tensor(&[d_h, f], 0.0, 0.4)),
            num_heads: heads,
        }
    }

    fn parallel_output(xs: &Tensor<f64>, w: &MlstmWeights<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let x = g.leaf(xs.clone());
        let proj = MlstmProjVars {
            w_q: g.leaf(w.w_q.clone()),
            w_k: g.leaf(w.w_k.clone()),
            w_v: g.leaf(w.w_v.clone()),
            w_out: g.leaf(w.w_out.clone()),
            w_gate_i: g.leaf(w.w_gate_i.clone()),
            w_gate_f: g.leaf(w.w_gate_f.clone()),
            w_gate_o: g.leaf(w.w_gate_o.clone()),
        };
        let phi = w.w_phi.as_ref().map(|p| g.leaf(p.clone()));
        g.value(mlstm_parallel(&g, x, &proj, w.num_heads, phi).unwrap())
    }

    #[test]
    fn mlstm_first_step_stores_outer_product() {
        // with m_0 = -inf the forget contribution vanishes: C_1 = i'_1 v k^T
        let mut rng = SeededRng::new(11);
        let w = random_weights(4, 2, None, &mut rng);
        let x: Tensor<f64> = rng.normal_tensor(&[4], 0.0, 1.0);
        let mut state = w.fresh_state();
        mlstm_step(&x, &w, &mut state).unwrap();

        let k_all = project_row(&x, &w.w_k);
        let v_all = project_row(&x, &w.w_v);
        for h in 0..2 {
            // m_1 = itilde so the stabilized input gate is exactly 1
            let i_gate = 1.0;
            for r in 0..2 {
                for c in 0..2 {
                    let want = i_gate * v_all[h * 2 + r] * k_all[h * 2 + c];
                    assert!((state.c[h].at(&[r, c]) - want).abs() < 1e-12);
                }
            }
            for c in 0..2 {
                let want = i_gate * k_all[h * 2 + c];
                assert!((state.n[h].data()[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlstm_retrieves_single_stored_pair() {
        // d_model=1, one head: q=k=[1], i'=1, denominator max{1,1}=1, o ~ 1
        let w = MlstmWeights::<f64> {
            w_q: t64(&[1, 1], &[1.0]),
            w_k: t64(&[1, 1], &[1.0]),
            w_v: t64(&[1, 1], &[0.37]),
            w_out: t64(&[1, 1], &[1.0]),
            w_gate_i: t64(&[1, 1], &[0.0]),
            w_gate_f: t64(&[1, 1], &[0.0]),
            w_gate_o: t64(&[1, 1], &[30.0]), // sigmoid(30) ~ 1 within 1e-13
            w_phi: None,
            num_heads: 1,
        };
        let mut state = w.fresh_state();
        let h = mlstm_step(&t64(&[1], &[1.0]), &w, &mut state).unwrap();
        assert!((h.item() - 0.37).abs() < 1e-9);
    }

    /// Unstabilized recurrence straight from the retrieval equations: a
    /// different route than the stabilized implementation.
    fn unstabilized_two_step_oracle(
        w: &MlstmWeights<f64>,
        x1: &Tensor<f64>,
        x2: &Tensor<f64>,
    ) -> Vec<f64> {
        let heads = w.num_heads;
        let d_h = w.head_dim();
        let d_model = w.d_model();
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut h2_concat = vec![0.0; d_model];
        for h in 0..heads {
            let mut c = vec![vec![0.0; d_h]; d_h];
            let mut n = vec![0.0; d_h];
            for (step, x) in [x1, x2].iter().enumerate() {
                let q_all = project_row(*x, &w.w_q);
                let k_all = project_row(*x, &w.w_k);
                let v_all = project_row(*x, &w.w_v);
                let i_gate = project_row(*x, &w.w_gate_i)[h].exp();
                let f_gate = project_row(*x, &w.w_gate_f)[h].exp();
                let o_gate = 1.0 / (1.0 + (-project_row(*x, &w.w_gate_o)[h]).exp());
                let q: Vec<f64> = q_all[h * d_h..(h + 1) * d_h].to_vec();
                let k = &k_all[h * d_h..(h + 1) * d_h];
                let v = &v_all[h * d_h..(h + 1) * d_h];
                for (r, cr) in c.iter_mut().enumerate() {
                    for (col, val) in cr.iter_mut().enumerate() {
                        *val = f_gate * *val + i_gate * v[r] * k[col];
                    }
                }
                for (col, nc) in n.iter_mut().enumerate() {
                    *nc = f_gate * *nc + i_gate * k[col];
                }
                if step == 1 {
                    let mut dot = 0.0;
                    for col in 0..d_h {
                        dot += n[col] * q[col] * scale;
                    }
                    let denom = dot.abs().max(1.0);
                    for r in 0..d_h {
                        let mut acc = 0.0;
                        for col in 0..d_h {
                            acc += c[r][col] * q[col] * scale;
                        }
                        h2_concat[h * d_h + r] = o_gate * acc / denom;
                    }
                }
            }
        }
        project_row(&Tensor::from_vec(vec![d_model], h2_concat).unwrap(), &w.w_out)
    }

    #[test]
    fn mlstm_two_steps_match_unstabilized_recurrence() {
        let mut rng = SeededRng::new(23);
        let w = random_weights(4, 2, None, &mut rng);
        let x1: Tensor<f64> = rng.normal_tensor(&[4], 0.0, 1.0);
        let x2: Tensor<f64> = rng.normal_tensor(&[4], 0.0, 1.0);
        let mut state = w.fresh_state();
        mlstm_step(&x1, &w, &mut state).unwrap();
        let h2 = mlstm_step(&x2, &w, &mut state).unwrap();
        let want = unstabilized_two_step_oracle(&w, &x1, &x2);
        for (a, b) in h2.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "stabilized {a} vs unstabilized {b}");
        }
    }

    #[test]
    fn mlstm_parallel_single_step_equals_step_form() {
        let mut rng = SeededRng::new(43);
        let w = random_weights(6, 2, None, &mut rng);
        let xs: Tensor<f64> = rng.normal_tensor(&[1, 6], 0.0, 1.0);
        let par = parallel_output(&xs, &w);
        let rec = mlstm_fold(&xs, &w).unwrap();
        for (a, b) in par.data().iter().zip(rec.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlstm_parallel_matches_folded_steps() {
        let mut rng = SeededRng::new(13);
        let w = random_weights(32, 2, None, &mut rng);
        let xs: Tensor<f64> = rng.normal_tensor(&[64, 32], 0.0, 1.0);
        let par = parallel_output(&xs, &w);
        let rec = mlstm_fold(&xs, &w).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in par.data().iter().zip(rec.data()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-8, "max abs deviation {worst}");
    }

    #[test]
    fn mlstm_parallel_matches_folded_steps_with_hedgehog() {
        let mut rng = SeededRng::new(19);
        let w = random_weights(16, 4, Some(3), &mut rng);
        let xs: Tensor<f64> = rng.normal_tensor(&[33, 16], 0.0, 1.0);
        let par = parallel_output(&xs, &w);
        let rec = mlstm_fold(&xs, &w).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in par.data().iter().zip(rec.data()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-8, "max abs deviation {worst}");
    }

    #[test]
    fn mlstm_tiny_input_gates_store_nothing() {
        // itilde -> -inf limit: with the Eq.4-equivalent floor the retrieval
        // goes to o * 0 = 0
        let mut rng = SeededRng::new(51);
        let mut w = random_weights(4, 1, None, &mut rng);
        w.w_gate_i = Tensor::full(&[4, 1], -60.0); // itilde = -60 * sum(x)
        let xs: Tensor<f64> = rng.uniform_tensor(&[5, 4], 0.5, 1.5); // keeps itilde very negative
        let out = mlstm_fold(&xs, &w).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-15, "expected ~0, got {v}");
        }
    }

    #[test]
    fn mlstm_stress_10k_steps_stays_finite() {
        let mut rng = SeededRng::new(57);
        let w = random_weights(8, 2, None, &mut rng);
        let mut state = w.fresh_state();
        for _ in 0..10_000 {
            let x: Tensor<f64> = rng.normal_tensor(&[8], 0.0, 1.0);
            let h = mlstm_step(&x, &w, &mut state).unwrap();
            assert!(h.all_finite());
        }
    }

    #[test]
    fn combine_fixed_half_with_equal_inputs_is_identity() {
        let mut rng = SeededRng::new(61);
        let g = Graph::new();
        let v = g.leaf(rng.normal_tensor::<f64>(&[3, 4], 0.0, 1.0));
        let out = combine(&g, v, v, SwaMode::FixedHalf, None).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(v).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn combine_fixed_half_is_symmetric() {
        let mut rng = SeededRng::new(63);
        let g = Graph::new();
        let a = g.leaf(rng.normal_tensor::<f64>(&[2, 3], 0.0, 1.0));
        let b = g.leaf(rng.normal_tensor::<f64>(&[2, 3], 0.0, 1.0));
        let ab = g.value(combine(&g, a, b, SwaMode::FixedHalf, None).unwrap());
        let ba = g.value(combine(&g, b, a, SwaMode::FixedHalf, None).unwrap());
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn combine_dynmod_alpha_zero_is_first_input() {
        let mut rng = SeededRng::new(67);
        let g = Graph::new();
        let a = g.leaf(rng.normal_tensor::<f64>(&[2, 3], 0.0, 1.0));
        let b = g.leaf(rng.normal_tensor::<f64>(&[2, 3], 0.0, 1.0));
        let alpha = g.leaf(Tensor::zeros(&[1]));
        let out = g.value(combine(&g, a, b, SwaMode::DynMod, Some(alpha)).unwrap());
        for (x, y) in out.data().iter().zip(g.value(a).data()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn combine_bounded_coefficient_is_tanh_alpha() {
        let g = Graph::new();
        let a = g.leaf(Tensor::<f64>::zeros(&[1, 2]));
        let b = g.leaf(Tensor::<f64>::ones(&[1, 2]));
        let alpha = g.leaf(t64(&[1], &[10.0]));
        let out = g.value(combine(&g, a, b, SwaMode::DynModBounded, Some(alpha)).unwrap());
        // tanh(10), evaluated independently
        let want = 0.999999995878;
        for v in out.data() {
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn combine_bounded_coefficient_in_open_interval() {
        // tanh maps to (-1, 1); in f64 the value rounds onto the boundary
        // once |alpha| > ~19, so strict interiority is asserted where the
        // gap is representable and plain boundedness everywhere.
        for raw in [-100.0, -19.0, -5.0, 0.0, 3.0, 18.0, 100.0] {
            let g = Graph::new();
            let a = g.leaf(Tensor::<f64>::zeros(&[1]));
            let b = g.leaf(Tensor::<f64>::ones(&[1]));
            let alpha = g.leaf(t64(&[1], &[raw]));
            let coeff =
                g.value(combine(&g, a, b, SwaMode::DynModBounded, Some(alpha)).unwrap()).item();
            assert!((-1.0..=1.0).contains(&coeff), "alpha {raw} -> {coeff}");
            if raw.abs() <= 18.0 {
                assert!(coeff.abs() < 1.0, "alpha {raw} -> {coeff}");
            }
        }
    }

    #[test]
    fn combine_shape_mismatch_is_error() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 2]));
        assert!(combine(&g, a, b, SwaMode::FixedHalf, None).is_err());
    }

    #[test]
    fn config_rejects_swa_with_self_attention() {
        let cfg = MixerConfig {
            kind: MixerKind::SelfAttention,
            swa: SwaMode::FixedHalf,
            ..MixerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
