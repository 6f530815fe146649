//! The assembled decoder: embedding, pre-norm residual blocks around a token
//! mixer and a SwiGLU feed-forward, a final RMSNorm, and the lm head.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layers::{cross_entropy_mean, embed, lm_head, rmsnorm, swiglu_ffn};
use crate::mixers::{mixer_forward, MixerConfig, MixerKind, MixerVars, SwaMode};
use crate::param::{BoundParams, ParamSet, Parameter, ShapeClass};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub mixer: MixerConfig,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
    pub separate_swa_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 15_000,
            d_model: 128,
            num_layers: 4,
            num_heads: 4,
            intermediate_size: 256,
            mixer: MixerConfig::default(),
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            tie_embeddings: false,
            separate_swa_projections: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.num_layers == 0 {
            return Err(CoreError::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(CoreError::Config(format!(
                "head dim {} must be even for rotary pairing",
                self.head_dim()
            )));
        }
        if self.intermediate_size == 0 {
            return Err(CoreError::Config("intermediate size must be positive".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(CoreError::Config("norm epsilon must be positive".into()));
        }
        self.mixer.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn uses_alpha(&self) -> bool {
        matches!(self.mixer.swa, SwaMode::DynMod | SwaMode::DynModBounded)
    }
}

#[derive(Debug, Clone)]
struct LayerIndex {
    norm1: usize,
    norm2: usize,
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_out: usize,
    gates: Option<(usize, usize, usize)>,
    conv_q: Option<usize>,
    conv_k: Option<usize>,
    w_phi: Option<usize>,
    alpha: Option<usize>,
    swa_proj: Option<(usize, usize, usize)>,
    ffn_gate: usize,
    ffn_up: usize,
    ffn_down: usize,
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    embedding: usize,
    lm_head: Option<usize>,
    final_norm: usize,
    layers: Vec<LayerIndex>,
}

/// Delta kernel: identity convolution at init (tap at the current position).
fn delta_kernel<F: Scalar>(d: usize, k: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); d * k];
    for c in 0..d {
        data[c * k + (k - 1)] = F::one();
    }
    Tensor::from_vec(vec![d, k], data).expect("sized")
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> Model<F> {
    /// Deterministic initialization: identical seed and config give
    /// bit-identical parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed).derive(0x6d6f64656c); // "model"
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let heads = cfg.num_heads;
        let d_h = cfg.head_dim();
        let f = cfg.intermediate_size;

        let mut add = |params: &mut ParamSet<F>,
                       name: String,
                       value: Tensor<F>,
                       class: ShapeClass|
         -> Result<usize> { params.add(Parameter::new(name, value, class)?) };

        let embedding = add(
            &mut params,
            "embedding.table".into(),
            rng.normal_tensor(&[cfg.vocab_size, d], 0.0, INIT_STD),
            ShapeClass::ScalarLike,
        )?;

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |suffix: &str| format!("layer.{l}.{suffix}");
            let norm1 =
                add(&mut params, p("norm1.gain"), Tensor::ones(&[d]), ShapeClass::ScalarLike)?;
            let w_q = add(
                &mut params,
                p("mixer.q_proj"),
                rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let w_k = add(
                &mut params,
                p("mixer.k_proj"),
                rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let w_v = add(
                &mut params,
                p("mixer.v_proj"),
                rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let w_out = add(
                &mut params,
                p("mixer.out_proj"),
                rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let gates = if cfg.mixer.kind == MixerKind::Mlstm {
                Some((
                    add(
                        &mut params,
                        p("mixer.gate_i"),
                        rng.normal_tensor(&[d, heads], 0.0, INIT_STD),
                        ShapeClass::ScalarLike,
                    )?,
                    add(
                        &mut params,
                        p("mixer.gate_f"),
                        rng.normal_tensor(&[d, heads], 0.0, INIT_STD),
                        ShapeClass::ScalarLike,
                    )?,
                    add(
                        &mut params,
                        p("mixer.gate_o"),
                        rng.normal_tensor(&[d, heads], 0.0, INIT_STD),
                        ShapeClass::ScalarLike,
                    )?,
                ))
            } else {
                None
            };
            let (conv_q, conv_k) = if cfg.mixer.short_conv {
                let k = cfg.mixer.short_conv_kernel;
                (
                    Some(add(&mut params, p("mixer.conv_q"), delta_kernel(d, k), ShapeClass::Matrix)?),
                    Some(add(&mut params, p("mixer.conv_k"), delta_kernel(d, k), ShapeClass::Matrix)?),
                )
            } else {
                (None, None)
            };
            let w_phi = if cfg.mixer.hedgehog {
                let fd = cfg.mixer.hedgehog_dim(d_h);
                Some(add(
                    &mut params,
                    p("mixer.hedgehog"),
                    rng.normal_tensor(&[d_h, fd], 0.0, INIT_STD),
                    ShapeClass::Matrix,
                )?)
            } else {
                None
            };
            let alpha = if cfg.uses_alpha() {
                // starts from the pure mLSTM path
                Some(add(&mut params, p("mixer.alpha"), Tensor::zeros(&[1]), ShapeClass::ScalarLike)?)
            } else {
                None
            };
            let swa_proj = if cfg.mixer.swa != SwaMode::Off && cfg.separate_swa_projections {
                Some((
                    add(
                        &mut params,
                        p("mixer.swa_q_proj"),
                        rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                        ShapeClass::Matrix,
                    )?,
                    add(
                        &mut params,
                        p("mixer.swa_k_proj"),
                        rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                        ShapeClass::Matrix,
                    )?,
                    add(
                        &mut params,
                        p("mixer.swa_v_proj"),
                        rng.normal_tensor(&[d, d], 0.0, INIT_STD),
                        ShapeClass::Matrix,
                    )?,
                ))
            } else {
                None
            };
            let norm2 =
                add(&mut params, p("norm2.gain"), Tensor::ones(&[d]), ShapeClass::ScalarLike)?;
            let ffn_gate = add(
                &mut params,
                p("ffn.w_gate"),
                rng.normal_tensor(&[d, f], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let ffn_up = add(
                &mut params,
                p("ffn.w_up"),
                rng.normal_tensor(&[d, f], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;
            let ffn_down = add(
                &mut params,
                p("ffn.w_down"),
                rng.normal_tensor(&[f, d], 0.0, INIT_STD),
                ShapeClass::Matrix,
            )?;

            layers.push(LayerIndex {
                norm1,
                norm2,
                w_q,
                w_k,
                w_v,
                w_out,
                gates,
                conv_q,
                conv_k,
                w_phi,
                alpha,
                swa_proj,
                ffn_gate,
                ffn_up,
                ffn_down,
            });
        }

        let final_norm =
            add(&mut params, "final_norm.gain".into(), Tensor::ones(&[d]), ShapeClass::ScalarLike)?;
        let lm_head_idx = if cfg.tie_embeddings {
            None
        } else {
            Some(add(
                &mut params,
                "lm_head.table".into(),
                rng.normal_tensor(&[cfg.vocab_size, d], 0.0, INIT_STD),
                ShapeClass::ScalarLike,
            )?)
        };

        Ok(Self { cfg, params, embedding, lm_head: lm_head_idx, final_norm, layers })
    }

    fn mixer_vars(&self, bound: &BoundParams, layer: &LayerIndex) -> MixerVars {
        MixerVars {
            w_q: bound.var(layer.w_q),
            w_k: bound.var(layer.w_k),
            w_v: bound.var(layer.w_v),
            w_out: bound.var(layer.w_out),
            gates: layer.gates.map(|(i, f, o)| (bound.var(i), bound.var(f), bound.var(o))),
            conv_q: layer.conv_q.map(|i| bound.var(i)),
            conv_k: layer.conv_k.map(|i| bound.var(i)),
            w_phi: layer.w_phi.map(|i| bound.var(i)),
            alpha: layer.alpha.map(|i| bound.var(i)),
            swa_proj: layer.swa_proj.map(|(q, k, v)| (bound.var(q), bound.var(k), bound.var(v))),
        }
    }

    /// Hidden states after all blocks and the final norm: [T, d_model].
    pub fn forward_hidden(&self, g: &Graph<F>, bound: &BoundParams, tokens: &[usize]) -> Result<Var> {
        let mut x = embed(g, bound.var(self.embedding), tokens)?;
        for layer in &self.layers {
            x = block_forward(
                g,
                x,
                &self.cfg.mixer,
                &BlockVars {
                    norm1_gain: bound.var(layer.norm1),
                    norm2_gain: bound.var(layer.norm2),
                    mixer: self.mixer_vars(bound, layer),
                    ffn_gate: bound.var(layer.ffn_gate),
                    ffn_up: bound.var(layer.ffn_up),
                    ffn_down: bound.var(layer.ffn_down),
                },
                self.cfg.num_heads,
                self.cfg.rope_base,
                self.cfg.norm_eps,
            )?;
        }
        rmsnorm(g, x, bound.var(self.final_norm), self.cfg.norm_eps)
    }

    /// Next-token logits [T, vocab].
    pub fn logits(&self, g: &Graph<F>, bound: &BoundParams, tokens: &[usize]) -> Result<Var> {
        let h = self.forward_hidden(g, bound, tokens)?;
        let table = match self.lm_head {
            Some(idx) => bound.var(idx),
            None => bound.var(self.embedding),
        };
        lm_head(g, h, table)
    }

    /// Mean next-token cross-entropy over a packed block (every position
    /// with a successor contributes).
    pub fn loss(&self, g: &Graph<F>, bound: &BoundParams, block: &[usize]) -> Result<Var> {
        if block.len() < 2 {
            return Err(CoreError::Input(format!(
                "a training block needs at least 2 tokens, got {}",
                block.len()
            )));
        }
        let inputs = &block[..block.len() - 1];
        let targets = &block[1..];
        let logits = self.logits(g, bound, inputs)?;
        cross_entropy_mean(g, logits, targets)
    }

    /// Loss restricted to the given positions (separator masking).
    pub fn loss_masked(
        &self,
        g: &Graph<F>,
        bound: &BoundParams,
        block: &[usize],
        keep: &[usize],
    ) -> Result<Var> {
        if block.len() < 2 {
            return Err(CoreError::Input("a training block needs at least 2 tokens".into()));
        }
        if keep.is_empty() {
            return Err(CoreError::Input("separator masking removed every loss position".into()));
        }
        let inputs = &block[..block.len() - 1];
        let targets = &block[1..];
        let logits = self.logits(g, bound, inputs)?;
        let sel = g.index_select(logits, 0, std::sync::Arc::new(keep.to_vec()))?;
        let kept_targets: Vec<usize> = keep.iter().map(|&i| targets[i]).collect();
        cross_entropy_mean(g, sel, &kept_targets)
    }

    /// Per-layer (raw alpha, effective coefficient); empty for models
    /// without dynamic modulation.
    pub fn alpha_trace(&self) -> Vec<AlphaTraceEntry> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(idx) = layer.alpha {
                let raw = self.params.get(idx).value.item().as_f64();
                let effective = match self.cfg.mixer.swa {
                    SwaMode::DynMod => raw,
                    SwaMode::DynModBounded => raw.tanh(),
                    _ => raw,
                };
                out.push(AlphaTraceEntry { layer: i, raw, effective });
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTraceEntry {
    pub layer: usize,
    pub raw: f64,
    pub effective: f64,
}

/// Graph variables for one residual block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm2_gain: Var,
    pub mixer: MixerVars,
    pub ffn_gate: Var,
    pub ffn_up: Var,
    pub ffn_down: Var,
}

/// Pre-norm residual block: x + Mixer(RMSNorm(x)), then + FFN(RMSNorm(.)).
pub fn block_forward<F: Scalar>(
    g: &Graph<F>,
    x: Var,
    mixer_cfg: &MixerConfig,
    vars: &BlockVars,
    num_heads: usize,
    rope_base: f64,
    norm_eps: f64,
) -> Result<Var> {
    let normed = rmsnorm(g, x, vars.norm1_gain, norm_eps)?;
    let mixed = mixer_forward(g, normed, mixer_cfg, &vars.mixer, num_heads, rope_base)?;
    let x = g.add(x, mixed)?;
    let normed2 = rmsnorm(g, x, vars.norm2_gain, norm_eps)?;
    let ffn = swiglu_ffn(g, normed2, vars.ffn_gate, vars.ffn_up, vars.ffn_down)?;
    g.add(x, ffn)
}
