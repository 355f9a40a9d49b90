//! Nucleus sampling and EOS-terminated generation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{KvCache, Transformer};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            p: 0.95,
            max_new_tokens: 256,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p = {} outside (0, 1]", self.p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt_ids: Vec<u32>,
    /// Sampled tokens; ends with EOS when `ended_with_eos`.
    pub output_ids: Vec<u32>,
    pub ended_with_eos: bool,
    pub steps: usize,
}

/// The nucleus of `probs`: tokens sorted by probability descending (ties by
/// id ascending), cut at the shortest prefix whose mass reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(u32, f64)>> {
    if probs.is_empty() {
        return Err(Error::Invalid("empty distribution".into()));
    }
    if let Some(bad) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Invalid(format!("invalid probability {bad}")));
    }
    let mut sorted: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, &q)| (i as u32, q)).collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = sorted.len();
    for (i, &(_, q)) in sorted.iter().enumerate() {
        mass += q;
        if mass >= p {
            keep = i + 1;
            break;
        }
    }
    sorted.truncate(keep);
    Ok(sorted)
}

/// Draws from the renormalized nucleus of `probs`.
pub fn top_p_sample(probs: &[f64], p: f64, rng: &mut Rng) -> Result<u32> {
    let kept = nucleus(probs, p)?;
    let total: f64 = kept.iter().map(|(_, q)| q).sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("distribution has no mass".into()));
    }
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for &(id, q) in &kept {
        acc += q;
        if target < acc {
            return Ok(id);
        }
    }
    // rounding left `target` at the very top
    Ok(kept.iter().rev().find(|(_, q)| *q > 0.0).unwrap().0)
}

/// Softmax of `logits / temperature` in 64-bit.
pub fn probabilities(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn prefill(model: &Transformer<f32>, ids: &[u32]) -> Result<(KvCache<f32>, Vec<f32>)> {
    let mut cache = model.kv_cache();
    let mut logits = Vec::new();
    for &id in ids {
        logits = model.step(&mut cache, id)?;
    }
    Ok((cache, logits))
}

/// Samples a continuation of `prompt_ids`. Stops after emitting `eos` (when
/// given) or after `max_new_tokens`. Past the context length the model sees
/// the most recent `context_len - 1` tokens.
pub fn generate(model: &Transformer<f32>, prompt_ids: &[u32], eos: Option<u32>, cfg: &GenConfig) -> Result<Generation> {
    cfg.validate()?;
    let ctx = model.cfg.context_len;
    if prompt_ids.is_empty() {
        return Err(Error::Invalid("generation needs a non-empty prompt".into()));
    }
    if prompt_ids.len() > ctx {
        return Err(Error::SequenceTooLong {
            len: prompt_ids.len(),
            context: ctx,
        });
    }
    if let Some(e) = eos {
        if e as usize >= model.cfg.vocab_size {
            return Err(Error::Vocab(format!("EOS id {e} is not in the model's vocabulary")));
        }
    }
    let mut gen = Generation {
        prompt_ids: prompt_ids.to_vec(),
        output_ids: Vec::new(),
        ended_with_eos: false,
        steps: 0,
    };
    if cfg.max_new_tokens == 0 {
        return Ok(gen);
    }
    let mut rng = Rng::new(cfg.seed);
    let mut all = prompt_ids.to_vec();
    let (mut cache, mut logits) = prefill(model, prompt_ids)?;
    while gen.steps < cfg.max_new_tokens {
        let probs = probabilities(&logits, cfg.temperature);
        let next = top_p_sample(&probs, cfg.p, &mut rng)?;
        gen.output_ids.push(next);
        gen.steps += 1;
        all.push(next);
        if Some(next) == eos {
            gen.ended_with_eos = true;
            break;
        }
        if gen.steps == cfg.max_new_tokens {
            break;
        }
        if cache.len() == ctx {
            let window = &all[all.len() - (ctx - 1)..];
            (cache, logits) = prefill(model, window)?;
        } else {
            logits = model.step(&mut cache, next)?;
        }
    }
    Ok(gen)
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub doc_id: String,
    pub system: String,
    pub output_text: String,
    pub output_ids: Vec<u32>,
    pub ended_with_eos: bool,
    pub seed: u64,
}

pub fn write_generations(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            index: i,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn nucleus_example() {
        let n = nucleus(&[0.5, 0.3, 0.2], 0.8).unwrap();
        assert_eq!(n.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[top_p_sample(&[0.5, 0.3, 0.2], 0.8, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        let f0 = counts[0] as f64 / 20_000.0;
        assert!((f0 - 0.625).abs() < 0.02, "{f0}");
    }

    #[test]
    fn ties_go_to_lower_id() {
        let n = nucleus(&[0.25, 0.25, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(n.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        let n = nucleus(&[0.1, 0.45, 0.45], 0.3).unwrap();
        assert_eq!(n[0].0, 1);
    }

    #[test]
    fn small_p_is_argmax() {
        let mut rng = Rng::new(0);
        for _ in 0..100 {
            assert_eq!(top_p_sample(&[0.2, 0.7, 0.1], 0.3, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut rng = Rng::new(0);
        assert!(top_p_sample(&[0.5, f64::NAN], 0.9, &mut rng).is_err());
    }

    fn model() -> Transformer<f32> {
        Transformer::init(&ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            context_len: 6,
            vocab_size: 7,
            dropout: 0.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn zero_budget_is_empty() {
        let cfg = GenConfig {
            max_new_tokens: 0,
            ..GenConfig::default()
        };
        let g = generate(&model(), &[1, 2], Some(0), &cfg).unwrap();
        assert!(g.output_ids.is_empty() && !g.ended_with_eos);
    }

    #[test]
    fn stops_at_eos_when_it_dominates() {
        let mut m = model();
        // push the EOS row of the tied embedding far along every direction
        // the final layer norm can produce by making its logit huge
        let d = m.cfg.d_model;
        let lnf_b = m.layout.lnf_b;
        let lnf_g = m.layout.lnf_g;
        for i in 0..d {
            m.params[lnf_g + i] = 0.0;
            m.params[lnf_b + i] = 1.0;
        }
        let eos = 4u32;
        for i in 0..d {
            m.params[m.layout.wte + eos as usize * d + i] = 5.0;
        }
        let cfg = GenConfig {
            p: 0.01,
            max_new_tokens: 10,
            ..GenConfig::default()
        };
        let g = generate(&m, &[1], Some(eos), &cfg).unwrap();
        assert_eq!(g.output_ids, vec![eos]);
        assert!(g.ended_with_eos);
        assert_eq!(g.steps, 1);
    }

    #[test]
    fn deterministic_and_slides_past_context() {
        let cfg = GenConfig {
            max_new_tokens: 20,
            seed: 9,
            ..GenConfig::default()
        };
        let a = generate(&model(), &[1, 2, 3], None, &cfg).unwrap();
        let b = generate(&model(), &[1, 2, 3], None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output_ids.len(), 20);
        assert!(!a.ended_with_eos);
    }

    #[test]
    fn eos_outside_vocab_is_an_error() {
        assert!(generate(&model(), &[1], Some(7), &GenConfig::default()).is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let recs = vec![GenerationRecord {
            doc_id: "d0".into(),
            system: "eop-diy".into(),
            output_text: "a b".into(),
            output_ids: vec![3, 4],
            ended_with_eos: true,
            seed: 1,
        }];
        write_generations(&path, &recs).unwrap();
        assert_eq!(read_generations(&path).unwrap(), recs);
    }
}
