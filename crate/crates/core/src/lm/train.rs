//! Optimizer loop.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, TrainConfig};
use super::model::{nll_and_grad, Transformer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textcodec::Codec;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One training sequence. Targets before `body_start` (the prompt) are not
/// scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSeq {
    pub ids: Vec<u32>,
    pub body_start: usize,
}

impl TrainSeq {
    pub fn new(ids: Vec<u32>, body_start: usize) -> Self {
        TrainSeq { ids, body_start }
    }

    /// Every next-token prediction is scored.
    pub fn full(ids: Vec<u32>) -> Self {
        TrainSeq { ids, body_start: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub valid_nll: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the eval point with the lowest validation NLL (the
    /// final step when there is no validation data).
    pub checkpoint: Checkpoint,
    pub best_step: usize,
    pub best_valid_nll: Option<f64>,
    pub final_params: Vec<f32>,
    pub curve: Vec<CurvePoint>,
}

/// A window of at most `context_len + 1` tokens with its target mask.
fn window<'a>(seq: &'a TrainSeq, context_len: usize, rng: Option<&mut Rng>) -> (&'a [u32], Vec<bool>) {
    let span = context_len + 1;
    let start = match rng {
        Some(rng) if seq.ids.len() > span => rng.below(seq.ids.len() - span + 1),
        _ => 0,
    };
    let ids = &seq.ids[start..(start + span).min(seq.ids.len())];
    let mask = (1..ids.len()).map(|j| start + j >= seq.body_start).collect();
    (ids, mask)
}

/// Summed NLL and scored-token count; adds the gradient of the summed NLL
/// into `grads` when given.
fn seq_nll(
    model: &Transformer<f32>,
    ids: &[u32],
    mask: &[bool],
    grads: Option<&mut [f32]>,
    dropout: Option<(&mut Rng, f64)>,
) -> Result<(f64, usize)> {
    if ids.len() < 2 || !mask.iter().any(|m| *m) {
        return Ok((0.0, 0));
    }
    let inp = &ids[..ids.len() - 1];
    let fwd = model.forward(inp, dropout)?;
    let want = grads.is_some();
    let (sum, count, dlogits) = nll_and_grad(&fwd.logits, model.cfg.vocab_size, &ids[1..], mask, want)?;
    if let Some(g) = grads {
        model.backward(&fwd, inp, &dlogits, g);
    }
    Ok((sum, count))
}

/// Token-pooled NLL over `seqs`, each truncated to its first window.
pub fn pooled_nll(model: &Transformer<f32>, seqs: &[TrainSeq]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in seqs {
        let (ids, mask) = window(s, model.cfg.context_len, None);
        let (a, b) = seq_nll(model, ids, &mask, None, None)?;
        sum += a;
        count += b;
    }
    if count == 0 {
        return Err(Error::Invalid("no scored tokens".into()));
    }
    Ok(sum / count as f64)
}

/// Step of the lowest validation NLL; the earliest wins ties.
pub fn best_eval(curve: &[CurvePoint]) -> Option<(usize, f64)> {
    curve
        .iter()
        .filter_map(|p| p.valid_nll.map(|v| (p.step, v)))
        .fold(None, |best, (s, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((s, v)),
        })
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] / c2).sqrt() + ADAM_EPS as f32);
        }
    }
}

/// Trains a freshly initialized model.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_seqs: &[TrainSeq],
    valid_seqs: &[TrainSeq],
    codec: Option<Codec>,
) -> Result<TrainOutcome> {
    let model = Transformer::<f32>::init(model_cfg)?;
    train_model(model, train_cfg, train_seqs, valid_seqs, codec)
}

/// Continues training `model` from its current parameters.
pub fn train_model(
    mut model: Transformer<f32>,
    cfg: &TrainConfig,
    train_seqs: &[TrainSeq],
    valid_seqs: &[TrainSeq],
    codec: Option<Codec>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_seqs.iter().all(|s| s.ids.len() < 2 || s.body_start >= s.ids.len()) {
        return Err(Error::Invalid("training data has no scored tokens".into()));
    }
    let n = model.params.len();
    let seed = model.cfg.seed;
    let dropout = model.cfg.dropout;
    let mut order_rng = Rng::derive(seed, 1);
    let mut crop_rng = Rng::derive(seed, 2);
    let mut drop_rng = Rng::derive(seed, 3);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0;

    let mut adam = Adam::new(n);
    let mut grads = vec![0f32; n];
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut best: Option<(usize, f64, Vec<f32>)> = None;

    for step in 1..=cfg.total_steps {
        grads.fill(0.0);
        let (mut sum, mut count) = (0.0, 0usize);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            let seq = &train_seqs[order[cursor]];
            cursor += 1;
            let (ids, mask) = window(seq, model.cfg.context_len, Some(&mut crop_rng));
            let drop = (dropout > 0.0).then_some((&mut drop_rng, dropout));
            let (a, b) = seq_nll(&model, ids, &mask, Some(&mut grads), drop)?;
            sum += a;
            count += b;
        }
        if count == 0 {
            continue;
        }
        let train_loss = sum / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("training loss {train_loss}"),
            });
        }
        let scale = 1.0 / count as f32;
        let mut norm2 = 0f64;
        for g in grads.iter_mut() {
            *g *= scale;
            norm2 += (*g as f64) * (*g as f64);
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model.params, &grads, lr);

        let mut point = CurvePoint {
            step,
            train_loss,
            valid_nll: None,
            lr,
        };
        if !valid_seqs.is_empty() && (step % cfg.eval_every == 0 || step == cfg.total_steps) {
            let v = pooled_nll(&model, valid_seqs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("validation NLL {v}"),
                });
            }
            info!("step {step}: train {train_loss:.4} valid {v:.4} lr {lr:.2e}");
            if best.as_ref().is_none_or(|(_, bv, _)| v < *bv) {
                best = Some((step, v, model.params.clone()));
            }
            point.valid_nll = Some(v);
        } else {
            debug!("step {step}: train {train_loss:.4} lr {lr:.2e}");
        }
        curve.push(point);
    }

    let final_params = model.params.clone();
    let (best_step, best_valid_nll, params) = match best {
        Some((s, v, p)) => (s, Some(v), p),
        None => (cfg.total_steps, None, final_params.clone()),
    };
    model.params = params;
    let mut checkpoint = Checkpoint::new(&model, best_step, codec);
    checkpoint.meta = serde_json::json!({ "train": cfg, "best_valid_nll": best_valid_nll });
    Ok(TrainOutcome {
        checkpoint,
        best_step,
        best_valid_nll,
        final_params,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 16,
            vocab_size: 8,
            dropout: 0.0,
            seed,
        }
    }

    fn data() -> Vec<TrainSeq> {
        (0..6)
            .map(|i| TrainSeq::full((0..12).map(|j| ((i + j) % 7) as u32).collect()))
            .collect()
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = TrainConfig {
            batch_size: 2,
            warmup_steps: 1,
            peak_lr: 0.0,
            total_steps: 5,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let init = Transformer::<f32>::init(&small(1)).unwrap();
        let out = train(&small(1), &cfg, &data(), &data(), None).unwrap();
        assert_eq!(out.final_params, init.params);
        let v: Vec<f64> = out.curve.iter().filter_map(|p| p.valid_nll).collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic() {
        let cfg = TrainConfig {
            batch_size: 3,
            warmup_steps: 2,
            peak_lr: 1e-2,
            total_steps: 6,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let a = train(&small(4), &cfg, &data(), &data()[..2], None).unwrap();
        let b = train(&small(4), &cfg, &data(), &data()[..2], None).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn loss_goes_down() {
        let cfg = TrainConfig {
            batch_size: 4,
            warmup_steps: 5,
            peak_lr: 1e-2,
            total_steps: 60,
            eval_every: 30,
            ..TrainConfig::default()
        };
        let out = train(&small(2), &cfg, &data(), &data(), None).unwrap();
        let first = out.curve.first().unwrap().train_loss;
        let last = out.curve.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn best_eval_picks_earliest_minimum() {
        let pt = |step, v: Option<f64>| CurvePoint {
            step,
            train_loss: 1.0,
            valid_nll: v,
            lr: 0.0,
        };
        let curve = vec![pt(50, None), pt(100, Some(1.0)), pt(150, None), pt(200, Some(1.5)), pt(300, Some(1.0))];
        assert_eq!(best_eval(&curve), Some((100, 1.0)));
        assert_eq!(best_eval(&[pt(1, None)]), None);
    }

    #[test]
    fn prompt_tokens_are_not_scored() {
        let seq = TrainSeq::new(vec![1, 2, 3, 4, 5], 3);
        let (ids, mask) = window(&seq, 16, None);
        assert_eq!(ids.len(), 5);
        assert_eq!(mask, vec![false, false, true, true]);
        let long = TrainSeq::new((0..40).map(|i| i % 7).collect(), 2);
        let mut rng = Rng::new(0);
        for _ in 0..20 {
            let (ids, mask) = window(&long, 16, Some(&mut rng));
            assert_eq!(ids.len(), 17);
            assert_eq!(mask.len(), 16);
        }
    }

    #[test]
    fn empty_training_data_is_an_error() {
        let cfg = TrainConfig::default();
        assert!(train(&small(0), &cfg, &[TrainSeq::full(vec![1])], &[], None).is_err());
    }
}
