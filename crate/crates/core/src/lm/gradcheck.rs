//! Finite-difference verification of the hand-written backward pass.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::model::{nll_and_grad, Transformer};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Step used by [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-3;

/// Weight scale of the point being checked. The training init (0.02) leaves
/// layer-norm inputs so small that a step of 1e-3 is dominated by
/// truncation error, so the check runs at a well-conditioned random point.
pub const CHECK_SCALE: f64 = 0.5;

/// Floor of the element-wise denominator `max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst per-tensor error `||a - n|| / max(||a||, ||n||)`.
    pub max_rel_error: f64,
    /// Worst element-wise relative error; noisy for near-zero entries.
    pub max_elem_rel_error: f64,
    pub max_abs_error: f64,
    /// Relative error per named tensor.
    pub per_tensor: BTreeMap<String, f64>,
    /// Analytic gradient, kept for inspection.
    pub analytic: Vec<f64>,
}

fn mean_nll(model: &Transformer<f64>, ids: &[u32]) -> Result<f64> {
    let (inp, targets) = (&ids[..ids.len() - 1], &ids[1..]);
    let logits = model.logits(inp)?;
    let mask = vec![true; targets.len()];
    let (sum, count, _) = nll_and_grad(&logits, model.cfg.vocab_size, targets, &mask, false)?;
    Ok(sum / count as f64)
}

/// Analytic gradient of the mean next-token NLL of `ids`.
pub fn analytic_grad(model: &Transformer<f64>, ids: &[u32]) -> Result<(f64, Vec<f64>)> {
    if ids.len() < 2 {
        return Err(Error::Invalid("gradient check needs at least two tokens".into()));
    }
    let (inp, targets) = (&ids[..ids.len() - 1], &ids[1..]);
    let fwd = model.forward(inp, None)?;
    let mask = vec![true; targets.len()];
    let (sum, count, mut dlogits) = nll_and_grad(&fwd.logits, model.cfg.vocab_size, targets, &mask, true)?;
    let n = count as f64;
    for g in dlogits.iter_mut() {
        *g /= n;
    }
    let mut grads = vec![0.0; model.params.len()];
    model.backward(&fwd, inp, &dlogits, &mut grads);
    Ok((sum / n, grads))
}

/// Random parameters at which gradients are compared: unit-scale
/// embeddings, matrices at `CHECK_SCALE / sqrt(fan_in)`, small biases and
/// gains near 1.
pub fn check_point(cfg: &ModelConfig) -> Result<Transformer<f64>> {
    let mut model = Transformer::<f64>::init(cfg)?;
    let mut rng = Rng::derive(cfg.seed, 0x9c);
    for spec in &model.layout.specs {
        let name = spec.name.as_str();
        let (base, std) = if name == "wte" || name == "wpe" {
            (0.0, 1.0)
        } else if spec.shape.len() == 2 {
            (0.0, CHECK_SCALE / (spec.shape[0] as f64).sqrt())
        } else if name.ends_with(".g") {
            (1.0, 0.1)
        } else {
            (0.0, 0.1)
        };
        for v in &mut model.params[spec.range()] {
            *v = base + rng.normal() * std;
        }
    }
    Ok(model)
}

/// Compares the analytic gradient of a 64-bit model at a random point with
/// central differences of step `h` on every parameter.
pub fn grad_check_with(cfg: &ModelConfig, ids: &[u32], h: f64) -> Result<GradCheckReport> {
    if cfg.n_layers > 2 || cfg.d_model > 16 {
        return Err(Error::Config(format!(
            "gradient check is limited to 2 layers and width 16, got {} and {}",
            cfg.n_layers, cfg.d_model
        )));
    }
    let mut model = check_point(cfg)?;
    let (_, analytic) = analytic_grad(&model, ids)?;

    let mut max_rel: f64 = 0.0;
    let mut max_elem: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut per_tensor = BTreeMap::new();
    for spec in model.layout.specs.clone() {
        let mut worst: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for i in spec.range() {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = mean_nll(&model, ids)?;
            model.params[i] = orig - h;
            let down = mean_nll(&model, ids)?;
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            diff2 += abs * abs;
            a2 += a * a;
            n2 += numeric * numeric;
            worst = worst.max(rel);
        }
        let tensor_rel = if diff2 == 0.0 { 0.0 } else { diff2.sqrt() / a2.sqrt().max(n2.sqrt()) };
        max_rel = max_rel.max(tensor_rel);
        max_elem = max_elem.max(worst);
        per_tensor.insert(spec.name.clone(), tensor_rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_elem_rel_error: max_elem,
        max_abs_error: max_abs,
        per_tensor,
        analytic,
    })
}

/// Max per-tensor relative error at the default step.
pub fn grad_check(cfg: &ModelConfig, ids: &[u32]) -> Result<f64> {
    Ok(grad_check_with(cfg, ids, DEFAULT_STEP)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 10,
            vocab_size: 9,
            dropout: 0.0,
            seed,
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ids = [1, 5, 2, 8, 0, 3, 3];
        let r = grad_check_with(&cfg(7), &ids, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.per_tensor);
    }

    #[test]
    fn unused_positions_have_zero_gradient() {
        let c = cfg(3);
        let model = check_point(&c).unwrap();
        let ids = [1, 2, 3, 4];
        let (_, g) = analytic_grad(&model, &ids).unwrap();
        let d = c.d_model;
        let wpe = model.layout.wpe;
        // three input positions are used
        assert!(g[wpe..wpe + 3 * d].iter().any(|v| *v != 0.0));
        assert!(g[wpe + 3 * d..wpe + c.context_len * d].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn error_shrinks_quadratically_with_step() {
        let ids = [1, 5, 2, 8, 0, 3];
        let coarse = grad_check_with(&cfg(11), &ids, 4e-2).unwrap().max_abs_error;
        let fine = grad_check_with(&cfg(11), &ids, 2e-2).unwrap().max_abs_error;
        let ratio = coarse / fine;
        assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn refuses_large_models() {
        let big = ModelConfig {
            d_model: 32,
            ..cfg(0)
        };
        assert!(grad_check(&big, &[1, 2, 3]).is_err());
    }
}
