//! Sentence-level BLEU, truncated BLEU and distinct-n.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use log::warn;

use crate::error::{Error, Result};

/// Stand-in for a zero n-gram match count.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU of one candidate against one reference, in [0, 1]: clipped n-gram
/// precisions for orders 1..=n combined by geometric mean, zero counts
/// replaced by [`SMOOTHING_EPS`], times the brevity penalty. A candidate
/// shorter than `n` has no n-grams of the top orders, so the mean runs over
/// orders 1..=len instead; that keeps BLEU(x, x) at 1 for every x.
pub fn sentence_bleu<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let orders = n.min(cand.len());
    let mut log_sum = 0.0;
    for k in 1..=orders {
        let total = cand.len().saturating_sub(k - 1);
        let ref_counts = ngram_counts(reference, k);
        let matched: usize = ngram_counts(cand, k)
            .into_iter()
            .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = match (matched, total) {
            (0, t) => SMOOTHING_EPS / t as f64,
            (m, t) => m as f64 / t as f64,
        };
        log_sum += precision.ln();
    }
    let bp = if cand.len() < reference.len() {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / orders as f64).exp()
}

fn check_orders(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Metric("n-gram order must be at least 1".into()));
    }
    Ok(())
}

/// Macro-averaged sentence BLEU over aligned pairs, as a percentage.
pub fn bleu<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    check_orders(n)?;
    if cands.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} candidates for {} references",
            cands.len(),
            refs.len()
        )));
    }
    if cands.is_empty() {
        return Err(Error::Metric("no candidates".into()));
    }
    let empty = cands.iter().filter(|c| c.is_empty()).count();
    if empty > 0 {
        warn!("{empty} empty candidate(s) scored 0");
    }
    let sum: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| sentence_bleu(c, r, n))
        .sum();
    Ok(100.0 * sum / cands.len() as f64)
}

/// BLEU after cutting every candidate to its reference's length.
pub fn truncated_bleu<T: Eq + Hash + Clone>(cands: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    if cands.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} candidates for {} references",
            cands.len(),
            refs.len()
        )));
    }
    let cut: Vec<Vec<T>> = cands
        .iter()
        .zip(refs)
        .map(|(c, r)| c[..c.len().min(r.len())].to_vec())
        .collect();
    bleu(&cut, refs, n)
}

/// Unique n-grams over total n-grams of one sequence, as a percentage;
/// `None` when the sequence is shorter than `n`.
pub fn sequence_distinct<T: Eq + Hash>(seq: &[T], n: usize) -> Option<f64> {
    if n == 0 || seq.len() < n {
        return None;
    }
    let grams: Vec<&[T]> = seq.windows(n).collect();
    let unique: HashSet<&[T]> = grams.iter().copied().collect();
    Some(100.0 * unique.len() as f64 / grams.len().max(1) as f64)
}

/// Macro-averaged distinct-n; sequences shorter than `n` are skipped.
pub fn distinct_n<T: Eq + Hash>(seqs: &[Vec<T>], n: usize) -> Result<f64> {
    check_orders(n)?;
    let scores: Vec<f64> = seqs.iter().filter_map(|s| sequence_distinct(s, n)).collect();
    let skipped = seqs.len() - scores.len();
    if skipped > 0 {
        warn!("distinct-{n}: skipped {skipped} sequence(s) shorter than {n}");
    }
    if scores.is_empty() {
        return Err(Error::Metric(format!("no sequence has {n} tokens")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
