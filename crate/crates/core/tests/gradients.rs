//! Finite-difference verification of every layer and mixer, plus whole-model
//! losses. The central-difference checker is the ground truth here; all
//! checks run at 64-bit with relative tolerance 1e-5.

use blalm_core::gradcheck::{grad_check, standard_suite, GradCheckConfig};
use blalm_core::mixers::{MixerConfig, MixerKind, SwaMode};
use blalm_core::model::{Model, ModelConfig};
use blalm_core::{SeededRng, Tensor};

const TOL: f64 = 1e-5;

#[test]
fn standard_suite_passes_at_small_dims() {
    let report = standard_suite(&[4], &[1, 3]).unwrap();
    for e in &report.entries {
        assert!(e.max_rel_err <= TOL, "{} failed: {:.3e}", e.name, e.max_rel_err);
    }
}

fn tiny_model_cfg(kind: MixerKind, swa: SwaMode, hedgehog: bool, short_conv: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        d_model: 4,
        num_layers: 1,
        num_heads: 2,
        intermediate_size: 6,
        mixer: MixerConfig {
            kind,
            swa,
            swa_window: 2,
            hedgehog,
            short_conv,
            short_conv_kernel: 3,
            ..MixerConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Whole-model loss gradient w.r.t. every parameter.
fn check_model(cfg: ModelConfig, seed: u64) {
    let model: Model<f64> = Model::init(cfg, seed).unwrap();
    let tokens: Vec<usize> = vec![3, 1, 4, 1, 5, 9];
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let names: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
    let report = grad_check(
        &inputs,
        &names,
        |g, vars| {
            // rebuild the model forward with the perturbed parameter values
            let mut m = model.clone();
            for (i, v) in vars.iter().enumerate() {
                m.params.get_mut(i).value = g.value(*v);
            }
            let bound = blalm_core::param::BoundVarsShim::bind_existing(g, vars);
            m.loss(g, &bound, &tokens)
        },
        GradCheckConfig { epsilon: 1e-5, tolerance: TOL },
    )
    .unwrap();
    for e in &report.entries {
        assert!(e.max_rel_err <= TOL, "{} failed: {:.3e}", e.name, e.max_rel_err);
    }
}

#[test]
fn mlstm_model_loss_gradients() {
    check_model(tiny_model_cfg(MixerKind::Mlstm, SwaMode::Off, false, false), 7);
}

#[test]
fn mlstm_model_with_everything_gradients() {
    check_model(tiny_model_cfg(MixerKind::Mlstm, SwaMode::DynModBounded, true, true), 11);
}

#[test]
fn mlstm_model_dynmod_gradients() {
    check_model(tiny_model_cfg(MixerKind::Mlstm, SwaMode::DynMod, false, false), 13);
}

#[test]
fn attention_model_loss_gradients() {
    check_model(tiny_model_cfg(MixerKind::SelfAttention, SwaMode::Off, false, false), 17);
}

#[test]
fn single_mlstm_step_loss_at_d4_seed7() {
    // one-token forward through the mLSTM mixer is a single recurrent step
    let mut rng = SeededRng::new(7);
    let d = 4;
    let heads = 2;
    let inputs = vec![
        rng.normal_tensor(&[1, d], 0.0, 1.0),
        rng.normal_tensor(&[d, d], 0.0, 0.5),
        rng.normal_tensor(&[d, d], 0.0, 0.5),
        rng.normal_tensor(&[d, d], 0.0, 0.5),
        rng.normal_tensor(&[d, d], 0.0, 0.5),
        rng.normal_tensor(&[d, heads], 0.0, 0.5),
        rng.normal_tensor(&[d, heads], 0.0, 0.5),
        rng.normal_tensor(&[d, heads], 0.0, 0.5),
    ];
    let names = vec!["x", "w_q", "w_k", "w_v", "w_out", "gate_i", "gate_f", "gate_o"];
    let report = grad_check(
        &inputs,
        &names,
        |g, v| {
            let proj = blalm_core::mixers::MlstmProjVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_out: v[4],
                w_gate_i: v[5],
                w_gate_f: v[6],
                w_gate_o: v[7],
            };
            let y = blalm_core::mixers::mlstm_parallel(g, v[0], &proj, heads, None)?;
            Ok(g.sum_all(g.mul(y, y)?))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err <= TOL, "max rel err {:.3e}", report.max_rel_err);
}
