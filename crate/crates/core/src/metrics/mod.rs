//! Automatic metrics: the perplexity family, EOS statistics, BLEU,
//! truncated BLEU, distinct-n, average length and the EOS rank curve.

mod bleu;
mod rank;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::lm::{token_logprobs, Transformer};
use crate::textcodec::{Codec, ParaType, Special, Vocab};

pub use bleu::{bleu, distinct_n, sentence_bleu, sequence_distinct, truncated_bleu, SMOOTHING_EPS};
pub use rank::{bucket_of, eos_rank, eos_rank_curve, rank_curve_with, RankCurve, RankDoc, RankRow};
pub use report::{build_report, EvalReport, GenPair, ReportInputs, REPORT_COLUMNS, REPORT_SCHEMA};

/// Per-target log-probabilities of one document's body, as written to and
/// read from a logprob dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocLogprobs {
    pub doc_id: String,
    pub targets: Vec<u32>,
    pub logprobs: Vec<f64>,
    /// Indices into `targets` that are paragraph markers (needed to drop
    /// marker line breaks under the NL schemes).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub marker_positions: Vec<usize>,
    /// Whitespace words of the reference text, for word-level perplexity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_words: Option<usize>,
}

/// Which target positions a perplexity counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    ExcludeSpecials,
    EosOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Token,
    Word,
}

/// Ids of the tokens a selector treats as special.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub eos: u32,
    pub eop: Option<u32>,
    pub sep: Option<u32>,
}

impl SpecialIds {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        SpecialIds {
            eos: vocab.eos(),
            eop: vocab.special(Special::Eop),
            sep: vocab.special(Special::Sep),
        }
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.eos || Some(id) == self.eop || Some(id) == self.sep
    }
}

fn selected(doc: &DocLogprobs, selector: Selector, specials: &SpecialIds) -> Vec<usize> {
    let markers: BTreeSet<usize> = doc.marker_positions.iter().copied().collect();
    (0..doc.targets.len())
        .filter(|&i| {
            let t = doc.targets[i];
            match selector {
                Selector::All => true,
                Selector::ExcludeSpecials => !specials.is_special(t) && !markers.contains(&i),
                Selector::EosOnly => t == specials.eos,
            }
        })
        .collect()
}

/// Macro-averaged perplexity: the mean over documents of
/// `exp(selected NLL / denominator)`, where the denominator is the number of
/// selected targets (token unit) or the reference word count (word unit).
/// Documents with nothing selected are skipped with a warning.
pub fn perplexity(docs: &[DocLogprobs], selector: Selector, unit: Unit, specials: &SpecialIds) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for doc in docs {
        if doc.targets.len() != doc.logprobs.len() {
            return Err(Error::Metric(format!(
                "document {}: {} targets but {} logprobs",
                doc.doc_id,
                doc.targets.len(),
                doc.logprobs.len()
            )));
        }
        let idx = selected(doc, selector, specials);
        if idx.is_empty() {
            warn!("document {} has no selected positions; excluded", doc.doc_id);
            continue;
        }
        let nll: f64 = idx.iter().map(|&i| -doc.logprobs[i]).sum();
        let denom = match unit {
            Unit::Token => idx.len(),
            Unit::Word => match doc.ref_words {
                Some(0) => {
                    warn!("document {} has no reference words; excluded", doc.doc_id);
                    continue;
                }
                Some(w) => w,
                None => {
                    return Err(Error::Metric(format!(
                        "document {} lacks a reference word count",
                        doc.doc_id
                    )))
                }
            },
        };
        total += (nll / denom as f64).exp();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every document was excluded".into()));
    }
    Ok(total / used as f64)
}

/// Percentage of generations that ended with EOS.
pub fn eos_rate(ended_with_eos: &[bool]) -> Result<f64> {
    if ended_with_eos.is_empty() {
        return Err(Error::Metric("no generations".into()));
    }
    let n = ended_with_eos.iter().filter(|e| **e).count();
    Ok(100.0 * n as f64 / ended_with_eos.len() as f64)
}

/// Mean sequence length.
pub fn avg_length<T>(seqs: &[Vec<T>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Metric("no texts".into()));
    }
    Ok(seqs.iter().map(Vec::len).sum::<usize>() as f64 / seqs.len() as f64)
}

/// Scores a document's body under `model`: the prompt segment conditions but
/// is not scored.
pub fn doc_logprobs(model: &Transformer<f32>, codec: &Codec, doc: &Document, paratype: ParaType) -> Result<DocLogprobs> {
    let input = codec.model_input(doc, paratype, true)?;
    let lp = token_logprobs(model, &input.ids())?;
    let skip = input.prompt.len() - 1;
    let body = &lp[skip..];
    let marker = paratype.marker().and_then(|m| codec.vocab().special(m));
    let marker_positions = match marker {
        Some(m) => input
            .body
            .boundary_marks
            .iter()
            .copied()
            .filter(|&k| input.body.ids[k] == m)
            .collect(),
        None => Vec::new(),
    };
    Ok(DocLogprobs {
        doc_id: doc.id.clone(),
        targets: body.iter().map(|x| x.0).collect(),
        logprobs: body.iter().map(|x| x.1).collect(),
        marker_positions,
        ref_words: Some(doc.word_count()),
    })
}

pub fn write_logprobs(path: &Path, docs: &[DocLogprobs]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in docs {
        writeln!(f, "{}", serde_json::to_string(d)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_logprobs(path: &Path) -> Result<Vec<DocLogprobs>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            index: i,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
