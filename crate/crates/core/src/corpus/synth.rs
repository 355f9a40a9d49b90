//! Seeded synthetic story corpus.
//!
//! Each document is a prompt naming a topic and a part count, followed by
//! 3-8 paragraphs of short sentences. The closing paragraph opens with
//! "finally" and draws from a closing vocabulary, but both also leak into
//! earlier paragraphs, so the ending is signalled statistically rather than
//! by a fixed phrase.

use serde::{Deserialize, Serialize};

use super::{Document, Lang};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub seed: u64,
    pub min_paragraphs: usize,
    pub max_paragraphs: usize,
    pub max_sentences: usize,
    /// Chance that a sentence outside the closing paragraph uses the
    /// closing vocabulary or opens with "finally".
    pub closing_leak: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2400,
            seed: 0,
            min_paragraphs: 3,
            max_paragraphs: 8,
            max_sentences: 3,
            closing_leak: 0.15,
        }
    }
}

const COUNTS: [&str; 9] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"];
const SUBJECTS: [&str; 8] = ["the fox", "the king", "a girl", "the old man", "my friend", "the wolf", "a sailor", "the queen"];
const VERBS: [&str; 8] = ["saw", "found", "lost", "carried", "followed", "painted", "remembered", "sold"];
const OPENERS: [&str; 5] = ["then", "later", "next", "soon", "after that"];
const TOPICS: [(&str, [&str; 4]); 6] = [
    ("sea", ["a boat", "the waves", "a shell", "the harbor"]),
    ("forest", ["a tree", "the path", "a mushroom", "the cabin"]),
    ("city", ["a tower", "the market", "a coin", "the bridge"]),
    ("winter", ["the snow", "a sled", "the fire", "a coat"]),
    ("war", ["a sword", "the banner", "a horse", "the wall"]),
    ("music", ["a drum", "the song", "a flute", "the stage"]),
];
const CLOSING_VERBS: [&str; 3] = ["returned to", "came back to", "rested at"];
const CLOSING_OBJECTS: [&str; 4] = ["home", "the village", "the old house", "the quiet hill"];
const CLOSING_TAILS: [&str; 3] = ["and all was still", "and the day was over", "and nobody spoke again"];

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len())]
}

fn plain_sentence(rng: &mut Rng, topic: &[&str; 4], opener: Option<&str>) -> String {
    let object = if rng.uniform() < 0.7 {
        pick(rng, topic)
    } else {
        let t = &TOPICS[rng.below(TOPICS.len())].1;
        pick(rng, t)
    };
    let body = format!("{} {} {}", pick(rng, &SUBJECTS), pick(rng, &VERBS), object);
    match opener {
        Some(o) => format!("{o} {body}."),
        None => format!("{body}."),
    }
}

fn closing_sentence(rng: &mut Rng, opener: Option<&str>) -> String {
    let body = if rng.coin() {
        format!("{} {} {}", pick(rng, &SUBJECTS), pick(rng, &CLOSING_VERBS), pick(rng, &CLOSING_OBJECTS))
    } else {
        pick(rng, &CLOSING_TAILS).to_string()
    };
    match opener {
        Some(o) => format!("{o} {body}."),
        None => format!("{body}."),
    }
}

fn paragraph(rng: &mut Rng, cfg: &SynthConfig, topic: &[&str; 4], closing: bool) -> String {
    let n = 1 + rng.below(cfg.max_sentences);
    let mut sentences = Vec::with_capacity(n);
    for s in 0..n {
        let text = if closing && s == 0 {
            let body = format!("{} {} {}", pick(rng, &SUBJECTS), pick(rng, &CLOSING_VERBS), pick(rng, &CLOSING_OBJECTS));
            format!("finally {body}.")
        } else if closing {
            if rng.uniform() < 0.6 {
                closing_sentence(rng, None)
            } else {
                plain_sentence(rng, topic, None)
            }
        } else {
            let opener = if s == 0 && rng.uniform() < 0.7 {
                Some(pick(rng, &OPENERS))
            } else if rng.uniform() < cfg.closing_leak {
                Some("finally")
            } else {
                None
            };
            if rng.uniform() < cfg.closing_leak {
                closing_sentence(rng, opener)
            } else {
                plain_sentence(rng, topic, opener)
            }
        };
        sentences.push(text);
    }
    sentences.join(" ")
}

/// Deterministic corpus for `cfg`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Document>> {
    if cfg.min_paragraphs == 0 || cfg.min_paragraphs > cfg.max_paragraphs || cfg.max_paragraphs >= COUNTS.len() {
        return Err(Error::Config(format!(
            "paragraph range {}..={} must lie within 1..={}",
            cfg.min_paragraphs,
            cfg.max_paragraphs,
            COUNTS.len() - 1
        )));
    }
    if cfg.max_sentences == 0 || !(0.0..=1.0).contains(&cfg.closing_leak) {
        return Err(Error::Config("max_sentences must be >= 1 and closing_leak within [0, 1]".into()));
    }
    let mut rng = Rng::derive(cfg.seed, 0x5f);
    let span = cfg.max_paragraphs - cfg.min_paragraphs + 1;
    let docs = (0..cfg.n_docs)
        .map(|i| {
            let n = cfg.min_paragraphs + rng.below(span);
            let (name, topic) = &TOPICS[rng.below(TOPICS.len())];
            let prompt = format!("a tale of {} parts about the {name}", COUNTS[n]);
            let paragraphs = (0..n).map(|k| paragraph(&mut rng, cfg, topic, k + 1 == n)).collect();
            Document {
                id: format!("synth-{i}"),
                prompt,
                paragraphs,
                lang: Lang::English,
            }
        })
        .collect();
    Ok(docs)
}
