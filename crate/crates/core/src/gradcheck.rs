//! Central finite-difference gradient verification.
//!
//! The checker is the ground truth every layer and mixer is validated
//! against: it compares the reverse-mode gradient of a scalar-valued graph
//! against (f(x+eps e_i) - f(x-eps e_i)) / 2eps for every input element.
//! Checks run at 64-bit precision.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index where the worst error occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > tolerance).collect()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Check the reverse-mode gradients of `build` w.r.t. every input.
///
/// `build` maps leaf variables (bound to `inputs`, in order) to a scalar
/// loss; it is rebuilt for every perturbed evaluation, so it must be
/// deterministic.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    names: &[&str],
    build: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if inputs.len() != names.len() {
        return Err(CoreError::Contract(format!(
            "{} inputs but {} names",
            inputs.len(),
            names.len()
        )));
    }
    if cfg.epsilon <= 0.0 {
        return Err(CoreError::Contract("epsilon must be positive".into()));
    }

    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(CoreError::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(CoreError::DivergentFunction(format!("f(x) = {out}")));
        }
        Ok(out)
    };

    // Analytic pass.
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &vars)?;
    let loss_value = g.value(loss);
    if loss_value.len() != 1 {
        return Err(CoreError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            loss_value.shape()
        )));
    }
    if !loss_value.item().is_finite() {
        return Err(CoreError::DivergentFunction(format!("f(x) = {}", loss_value.item())));
    }
    let grads = g.backward(loss)?;

    let mut entries = Vec::with_capacity(inputs.len());
    let mut overall = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();

    for (pi, (input, name)) in inputs.iter().zip(names).enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[pi]) {
            Some(t) => {
                if t.shape() != input.shape() {
                    return Err(CoreError::Contract(format!(
                        "gradient shape {:?} != value shape {:?} for '{name}'",
                        t.shape(),
                        input.shape()
                    )));
                }
                t.to_f64_vec()
            }
            None => vec![0.0; input.len()],
        };

        let mut entry = GradCheckEntry {
            name: (*name).to_string(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        let base = input.to_f64_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += cfg.epsilon;
            work[pi] = Tensor::from_vec(input.shape().to_vec(), plus)?;
            let f_plus = eval(&work)?;

            let mut minus = base.clone();
            minus[i] -= cfg.epsilon;
            work[pi] = Tensor::from_vec(input.shape().to_vec(), minus)?;
            let f_minus = eval(&work)?;

            let numeric = (f_plus - f_minus) / (2.0 * cfg.epsilon);
            let err = rel_err(analytic[i], numeric);
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic_at_worst = analytic[i];
                entry.numeric_at_worst = numeric;
            }
        }
        work[pi] = input.clone();
        overall = overall.max(entry.max_rel_err);
        entries.push(entry);
    }

    Ok(GradCheckReport { entries, max_rel_err: overall })
}

/// Gradient-checks every layer and mixer family at the given widths and
/// sequence lengths: rmsnorm, swiglu, rope, short conv, causal and
/// sliding-window attention, the mLSTM (through a scalar loss), the hedgehog
/// map, all three combination rules, and the cross-entropy head.
pub fn standard_suite(dims: &[usize], seq_lens: &[usize]) -> Result<GradCheckReport> {
    use crate::layers;
    use crate::mixers::{self, MlstmProjVars, SwaMode};
    use crate::rng::SeededRng;

    let cfg = GradCheckConfig::default();
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut rng = SeededRng::new(0xC0FFEE);

    let mut run = |name: String,
                   inputs: Vec<Tensor<f64>>,
                   names: Vec<&str>,
                   build: &dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(&inputs, &names, build, cfg)?;
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for e in report.entries {
            if e.max_rel_err >= worst.max_rel_err {
                worst = GradCheckEntry { name: name.clone(), ..e };
            }
        }
        entries.push(worst);
        Ok(())
    };

    for &d in dims {
        for &t in seq_lens {
            let heads = 2;
            let d_h = d / heads;
            let tag = format!("[d={d},T={t}]");
            let positions: Vec<usize> = (0..t).collect();

            // rmsnorm
            let x = rng.normal_tensor(&[t, d], 0.0, 1.0);
            let gain = rng.normal_tensor(&[d], 1.0, 0.2);
            run(
                format!("rmsnorm{tag}"),
                vec![x, gain],
                vec!["x", "gain"],
                &|g, v| Ok(g.sum_all(g.mul(layers::rmsnorm(g, v[0], v[1], 1e-6)?, v[0])?)),
            )?;

            // swiglu_ffn
            let f_dim = d + 2;
            run(
                format!("swiglu_ffn{tag}"),
                vec![
                    rng.normal_tensor(&[t, d], 0.0, 1.0),
                    rng.normal_tensor(&[d, f_dim], 0.0, 0.5),
                    rng.normal_tensor(&[d, f_dim], 0.0, 0.5),
                    rng.normal_tensor(&[f_dim, d], 0.0, 0.5),
                ],
                vec!["x", "w_gate", "w_up", "w_down"],
                &|g, v| {
                    let y = layers::swiglu_ffn(g, v[0], v[1], v[2], v[3])?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;

            // rope_apply
            let pos = positions.clone();
            run(
                format!("rope_apply{tag}"),
                vec![rng.normal_tensor(&[t, d_h.max(2)], 0.0, 1.0)],
                vec!["x"],
                &move |g, v| {
                    let y = layers::rope_apply(g, v[0], &pos, 10_000.0)?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;

            // short_conv
            run(
                format!("short_conv{tag}"),
                vec![rng.normal_tensor(&[t, d], 0.0, 1.0), rng.normal_tensor(&[d, 3], 0.0, 0.5)],
                vec!["x", "kernel"],
                &|g, v| {
                    let y = layers::short_conv(g, v[0], v[1])?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;

            // causal and sliding-window attention
            let causal_inputs = vec![
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
            ];
            run(
                format!("causal_attention{tag}"),
                causal_inputs,
                vec!["q", "k", "v"],
                &|g, v| {
                    let y = mixers::causal_attention(g, v[0], v[1], v[2])?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;
            let swa_inputs = vec![
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
                rng.normal_tensor(&[t, heads, d_h], 0.0, 1.0),
            ];
            run(
                format!("swa_attention{tag}"),
                swa_inputs,
                vec!["q", "k", "v"],
                &|g, v| {
                    let y = mixers::swa_attention(g, v[0], v[1], v[2], 2)?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;

            // mLSTM through a scalar loss, plain and with hedgehog features
            for hedgehog in [false, true] {
                let mut inputs = vec![
                    rng.normal_tensor(&[t, d], 0.0, 1.0),
                    rng.normal_tensor(&[d, d], 0.0, 0.4),
                    rng.normal_tensor(&[d, d], 0.0, 0.4),
                    rng.normal_tensor(&[d, d], 0.0, 0.4),
                    rng.normal_tensor(&[d, d], 0.0, 0.4),
                    rng.normal_tensor(&[d, heads], 0.0, 0.4),
                    rng.normal_tensor(&[d, heads], 0.0, 0.4),
                    rng.normal_tensor(&[d, heads], 0.0, 0.4),
                ];
                let mut names =
                    vec!["x", "w_q", "w_k", "w_v", "w_out", "gate_i", "gate_f", "gate_o"];
                if hedgehog {
                    inputs.push(rng.normal_tensor(&[d_h, (d_h / 2).max(1)], 0.0, 0.4));
                    names.push("w_phi");
                }
                let label = if hedgehog { "mlstm_loss_hedgehog" } else { "mlstm_loss" };
                run(format!("{label}{tag}"), inputs, names, &move |g, v| {
                    let proj = MlstmProjVars {
                        w_q: v[1],
                        w_k: v[2],
                        w_v: v[3],
                        w_out: v[4],
                        w_gate_i: v[5],
                        w_gate_f: v[6],
                        w_gate_o: v[7],
                    };
                    let phi = if hedgehog { Some(v[8]) } else { None };
                    let y = mixers::mlstm_parallel(g, v[0], &proj, heads, phi)?;
                    Ok(g.sum_all(g.mul(y, y)?))
                })?;
            }

            // hedgehog map
            run(
                format!("hedgehog_map{tag}"),
                vec![
                    rng.normal_tensor(&[t, d_h], 0.0, 1.0),
                    rng.normal_tensor(&[d_h, 3], 0.0, 0.5),
                ],
                vec!["x", "w_phi"],
                &|g, v| {
                    let y = mixers::hedgehog_map(g, v[0], v[1])?;
                    Ok(g.sum_all(g.mul(y, y)?))
                },
            )?;

            // combination rules
            for mode in [SwaMode::FixedHalf, SwaMode::DynMod, SwaMode::DynModBounded] {
                let label = match mode {
                    SwaMode::FixedHalf => "combine_fixed_half",
                    SwaMode::DynMod => "combine_dynmod",
                    SwaMode::DynModBounded => "combine_dynmod_bounded",
                    SwaMode::Off => unreachable!(),
                };
                run(
                    format!("{label}{tag}"),
                    vec![
                        rng.normal_tensor(&[t, d], 0.0, 1.0),
                        rng.normal_tensor(&[t, d], 0.0, 1.0),
                        rng.normal_tensor(&[1], 0.3, 0.2),
                    ],
                    vec!["h_la", "h_swa", "alpha"],
                    &move |g, v| {
                        let y = mixers::combine(g, v[0], v[1], mode, Some(v[2]))?;
                        Ok(g.sum_all(g.mul(y, y)?))
                    },
                )?;
            }

            // cross-entropy head
            let vocab = 11;
            let targets: Vec<usize> = (0..t).map(|i| (i * 5 + 3) % vocab).collect();
            run(
                format!("cross_entropy{tag}"),
                vec![rng.normal_tensor(&[t, vocab], 0.0, 1.5)],
                vec!["logits"],
                &move |g, v| layers::cross_entropy_mean(g, v[0], &targets),
            )?;
        }
    }

    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // fn(x) = sum(x): analytic gradient all ones, central difference exact.
        let x = Tensor::from_f64_slice(vec![2, 3], &[0.3, -1.2, 0.0, 4.0, 2.5, -0.7]).unwrap();
        let report = grad_check(
            &[x],
            &["x"],
            |g, vars| Ok(g.sum_all(vars[0])),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-10, "max err {}", report.max_rel_err);
    }

    #[test]
    fn quadratic_matches_within_1e8() {
        // fn(x) = sum(x*x) on [1,2,3]: analytic gradient [2,4,6].
        let x = Tensor::from_f64_slice(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[x],
            &["x"],
            |g, vars| Ok(g.sum_all(g.mul(vars[0], vars[0])?)),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "max err {}", report.max_rel_err);
    }

    #[test]
    fn divergent_function_is_reported() {
        let x = Tensor::from_f64_slice(vec![1], &[-1.0]).unwrap();
        // log of a negative number is NaN
        let err = grad_check(
            &[x],
            &["x"],
            |g, vars| Ok(g.sum_all(g.log(vars[0]))),
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::DivergentFunction(_)));
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        // negative control: a "square" whose claimed derivative is 3x, not 2x
        let x = Tensor::from_f64_slice(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[x],
            &["x"],
            |g, vars| Ok(g.sum_all(g.custom_unary(vars[0], |v| v * v, |v, _| 3.0 * v))),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed(1e-5));
        assert!(report.max_rel_err > 0.1);
    }
}
