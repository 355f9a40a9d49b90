//! Fixtures shared by the benchmarks.

use plmw::lm::{ModelConfig, Transformer};
use plmw::rng::Rng;

/// A freshly initialized desk-scale model with the given vocabulary.
pub fn desk_model(vocab_size: usize) -> Transformer<f32> {
    let cfg = ModelConfig {
        vocab_size,
        ..ModelConfig::default()
    };
    Transformer::init(&cfg).expect("default config is valid")
}

pub fn random_ids(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..len).map(|_| rng.below(vocab_size) as u32).collect()
}

/// A skewed distribution over `v` ids, roughly Zipfian.
pub fn zipf_probs(v: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=v).map(|r| 1.0 / r as f64).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_words(n: usize, vocab: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| format!("w{}", rng.below(vocab))).collect()
}
