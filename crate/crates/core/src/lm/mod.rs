//! Small decoder-only transformer language model, trained from scratch.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layout;
pub mod model;
pub mod tensor;
pub mod train;

pub use checkpoint::{extend_vocab, Checkpoint};
pub use config::{LrDecay, ModelConfig, TrainConfig};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use model::{loss, KvCache, Transformer};
pub use train::{pooled_nll, train, train_model, CurvePoint, TrainOutcome, TrainSeq};

use crate::error::Result;
use tensor::log_softmax_f64;

/// Log-probability of each next token of `seq`: entry `t` scores `seq[t+1]`
/// given `seq[..=t]`. The scored sequence may be one token longer than the
/// context, since the last token is only ever a target.
pub fn token_logprobs(model: &Transformer<f32>, seq: &[u32]) -> Result<Vec<(u32, f64)>> {
    if seq.len() < 2 {
        return Ok(Vec::new());
    }
    let v = model.cfg.vocab_size;
    let logits = model.logits(&seq[..seq.len() - 1])?;
    Ok(seq[1..]
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            let lp = log_softmax_f64(&logits[t * v..(t + 1) * v]);
            (target, lp[target as usize])
        })
        .collect())
}

/// Full next-token log-distribution at every position of `seq`, one row
/// per input token.
pub fn next_token_logprobs(model: &Transformer<f32>, seq: &[u32]) -> Result<Vec<Vec<f64>>> {
    let v = model.cfg.vocab_size;
    let logits = model.logits(seq)?;
    Ok(logits.chunks_exact(v).map(log_softmax_f64).collect())
}

/// Ids sorted by descending probability, ties broken by ascending id.
pub fn sorted_distribution(logprobs: &[f64]) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> = logprobs.iter().enumerate().map(|(i, &l)| (i as u32, l)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
