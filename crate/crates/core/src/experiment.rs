//! Declarative experiments. One JSON document pins the corpus, codec, model,
//! training, generation and evaluation settings; [`compare`] then runs
//! serialize, train, generate and evaluate for every listed paratype and
//! writes one report row per paratype.
//!
//! The stage functions are public so the CLI can run them one at a time
//! with the same semantics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, synth_corpus, CorpusFormat, Document, SynthConfig};
use crate::decoder::{generate, GenConfig, GenerationRecord};
use crate::error::{Error, Result};
use crate::lm::{self, Checkpoint, CurvePoint, ModelConfig, TrainConfig, TrainOutcome, TrainSeq, Transformer};
use crate::metrics::{self, build_report, DocLogprobs, EvalReport, GenPair, RankCurve, RankDoc, ReportInputs, SpecialIds, Unit};
use crate::textcodec::{Codec, CodecMode, ParaType, TokenSeq};

pub const EXPERIMENT_SCHEMA: u32 = 1;

/// Cap on the corpus-scaled warmup, in optimizer steps.
pub const MAX_WARMUP: usize = 800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Pre-split corpus files.
    Files {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
        #[serde(default = "default_format")]
        format: CorpusFormat,
    },
    /// The seeded synthetic corpus; the last `n_valid + n_test` documents
    /// are held out.
    Synth {
        #[serde(default)]
        config: SynthConfig,
        n_valid: usize,
        n_test: usize,
    },
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSettings {
    pub mode: CodecMode,
    pub vocab_size: usize,
    /// Use this codec file instead of training one.
    pub path: Option<PathBuf>,
}

impl Default for CodecSettings {
    fn default() -> Self {
        CodecSettings {
            mode: CodecMode::Bpe,
            vocab_size: 300,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Number of test documents scored and prompted.
    pub max_docs: usize,
    /// Unit for BLEU, distinct-n and average length.
    pub bleu_unit: Unit,
    pub rank_curve: bool,
    /// Query rank at the marker token itself when a paragraph ends in one.
    pub marker_inclusive: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            max_docs: 200,
            bleu_unit: Unit::Word,
            rank_curve: true,
            marker_inclusive: true,
        }
    }
}

/// Versioned experiment description. `seed` overrides the model and
/// generation seeds and, for a synthetic corpus, the corpus seed.
/// `train.warmup_steps = 0` means one epoch of steps, capped at
/// [`MAX_WARMUP`]. Documents whose model input is longer than `max_tokens`
/// under any listed paratype are dropped, so every paratype sees the same
/// documents; the cap never exceeds `context_len + 1`, the longest input
/// the model can score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub seed: u64,
    pub corpus: CorpusSource,
    pub codec: CodecSettings,
    pub paratypes: Vec<ParaType>,
    pub append_eos: bool,
    pub max_tokens: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenConfig,
    pub eval: EvalSettings,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: EXPERIMENT_SCHEMA,
            seed: 0,
            corpus: CorpusSource::Synth {
                config: SynthConfig::default(),
                n_valid: 200,
                n_test: 200,
            },
            codec: CodecSettings::default(),
            paratypes: vec![
                ParaType::None,
                ParaType::SepNl,
                ParaType::SepDiy,
                ParaType::EopNl,
                ParaType::EopDiy,
            ],
            append_eos: true,
            max_tokens: 1024,
            model: ModelConfig::default(),
            train: TrainConfig {
                warmup_steps: 0,
                ..TrainConfig::default()
            },
            // the generation cap equals the desk context length
            generation: GenConfig::default(),
            eval: EvalSettings::default(),
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Schema and value checks. Paths are checked when the corpus is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::Config(format!(
                "experiment schema {} is not supported (expected {EXPERIMENT_SCHEMA})",
                self.schema
            )));
        }
        if self.paratypes.is_empty() {
            return Err(Error::Config("paratype list is empty".into()));
        }
        let mut seen = self.paratypes.clone();
        seen.sort_by_key(|p| p.as_str());
        seen.dedup();
        if seen.len() != self.paratypes.len() {
            return Err(Error::Config("paratype list has duplicates".into()));
        }
        if self.eval.max_docs == 0 {
            return Err(Error::Config("eval.max_docs must be at least 1".into()));
        }
        if let CorpusSource::Synth { config, n_valid, n_test } = &self.corpus {
            if n_valid + n_test >= config.n_docs {
                return Err(Error::Config(format!(
                    "synthetic corpus of {} documents leaves no training data after {n_valid} + {n_test} held out",
                    config.n_docs
                )));
            }
        }
        self.generation.validate()?;
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(4);
        model.validate()?;
        let mut train = self.train.clone();
        train.warmup_steps = train.warmup_steps.max(1);
        train.validate()
    }

    /// The effective document length cap.
    pub fn max_tokens(&self) -> usize {
        self.max_tokens.min(self.model.context_len + 1)
    }

    /// Training settings with a scaled warmup resolved.
    pub fn resolved_train(&self, n_train: usize) -> TrainConfig {
        let mut t = self.train.clone();
        if t.warmup_steps == 0 {
            t.warmup_steps = n_train.div_ceil(t.batch_size).clamp(1, MAX_WARMUP);
        }
        t
    }
}

/// Wraps a stage failure so the message names the stage.
pub fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.corpus {
        CorpusSource::Files {
            train,
            valid,
            test,
            format,
        } => Ok(Splits {
            train: corpus::load_corpus(train, *format)?,
            valid: corpus::load_corpus(valid, *format)?,
            test: corpus::load_corpus(test, *format)?,
        }),
        CorpusSource::Synth {
            config,
            n_valid,
            n_test,
        } => {
            let mut docs = synth_corpus(&SynthConfig {
                seed: cfg.seed,
                ..config.clone()
            })?;
            let test = docs.split_off(docs.len() - n_test);
            let valid = docs.split_off(docs.len() - n_valid);
            Ok(Splits {
                train: docs,
                valid,
                test,
            })
        }
    }
}

/// The base codec (no paragraph specials; see [`Codec::for_paratype`]).
pub fn build_codec(cfg: &CodecSettings, train: &[Document]) -> Result<Codec> {
    match &cfg.path {
        Some(p) => Codec::load(p),
        None => Codec::train(train, cfg.mode, cfg.vocab_size, &[]),
    }
}

/// Keeps documents whose model input fits `max_tokens` under every
/// paratype in `paratypes`.
pub fn fit_documents(docs: &[Document], codec: &Codec, paratypes: &[ParaType], max_tokens: usize) -> Result<Vec<Document>> {
    let mut kept = docs.to_vec();
    for &pt in paratypes {
        kept = corpus::filter_by_length(&kept, &codec.for_paratype(pt), pt, max_tokens)?;
    }
    Ok(kept)
}

pub fn training_seqs(codec: &Codec, docs: &[Document], paratype: ParaType, append_eos: bool) -> Result<Vec<TrainSeq>> {
    docs.iter()
        .map(|d| {
            let input = codec.model_input(d, paratype, append_eos)?;
            Ok(TrainSeq::new(input.ids(), input.prompt.len()))
        })
        .collect()
}

pub fn score_docs(model: &Transformer<f32>, codec: &Codec, docs: &[Document], paratype: ParaType) -> Result<Vec<DocLogprobs>> {
    docs.iter()
        .map(|d| metrics::doc_logprobs(model, codec, d, paratype))
        .collect()
}

/// One generation per document, seeded with `gen.seed + index`.
pub fn generate_docs(
    model: &Transformer<f32>,
    codec: &Codec,
    docs: &[Document],
    gen: &GenConfig,
    system: &str,
) -> Result<Vec<GenerationRecord>> {
    let eos = Some(codec.vocab().eos());
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let cfg = GenConfig {
                seed: gen.seed.wrapping_add(i as u64),
                ..gen.clone()
            };
            let g = generate(model, &codec.prompt_segment(&d.prompt), eos, &cfg)?;
            Ok(GenerationRecord {
                doc_id: d.id.clone(),
                system: system.to_string(),
                output_text: codec.decode(&g.output_ids)?,
                output_ids: g.output_ids,
                ended_with_eos: g.ended_with_eos,
                seed: cfg.seed,
            })
        })
        .collect()
}

/// Content units of a stripped sequence: the decoded text split into words,
/// or the token ids themselves.
fn units(codec: &Codec, seq: &TokenSeq, unit: Unit, lang: corpus::Lang) -> Result<Vec<String>> {
    match unit {
        Unit::Token => Ok(seq.ids.iter().map(u32::to_string).collect()),
        Unit::Word => Ok(corpus::words(&codec.decode(&seq.ids)?, lang)),
    }
}

/// Pairs each generation with its document's reference. Both sides go
/// through the same strip-and-decode path so paratypes compare on content
/// alone.
pub fn gen_pairs(
    codec: &Codec,
    docs: &[Document],
    records: &[GenerationRecord],
    paratype: ParaType,
    unit: Unit,
) -> Result<Vec<GenPair>> {
    let by_id: std::collections::HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    records
        .iter()
        .map(|r| {
            let doc = by_id
                .get(r.doc_id.as_str())
                .ok_or_else(|| Error::Metric(format!("generation for unknown document {}", r.doc_id)))?;
            let cand = TokenSeq::from_generated(&r.output_ids, codec.vocab(), paratype);
            let reference = codec.serialize_document(doc, paratype, false)?;
            Ok(GenPair {
                doc_id: r.doc_id.clone(),
                candidate: units(codec, &codec.strip_special(&cand), unit, doc.lang)?,
                reference: units(codec, &codec.strip_special(&reference), unit, doc.lang)?,
                ended_with_eos: r.ended_with_eos,
            })
        })
        .collect()
}

pub fn rank_docs(codec: &Codec, docs: &[Document], paratype: ParaType) -> Result<Vec<RankDoc>> {
    docs.iter()
        .map(|d| {
            let input = codec.model_input(d, paratype, false)?;
            Ok(RankDoc {
                ids: input.ids(),
                marks: input.absolute_marks(),
            })
        })
        .collect()
}

pub fn rank_curve(model: &Transformer<f32>, codec: &Codec, docs: &[Document], paratype: ParaType, marker_inclusive: bool) -> Result<RankCurve> {
    let rdocs = rank_docs(codec, docs, paratype)?;
    let markers: Vec<u32> = paratype
        .marker()
        .and_then(|m| codec.vocab().special(m))
        .into_iter()
        .collect();
    metrics::eos_rank_curve(model, &rdocs, codec.vocab().eos(), &markers, marker_inclusive)
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_loss,valid_nll,lr\n");
    for p in curve {
        let v = p.valid_nll.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(out, "{},{},{v},{}", p.step, p.train_loss, p.lr).unwrap();
    }
    out
}

/// Everything one paratype run produced.
#[derive(Debug, Clone)]
pub struct ParatypeRun {
    pub paratype: ParaType,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub rank_curve: Option<RankCurve>,
    pub generations: Vec<GenerationRecord>,
    pub train_secs: f64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The evaluation documents: the first `eval.max_docs` test documents.
pub fn eval_docs<'a>(cfg: &ExperimentConfig, splits: &'a Splits) -> &'a [Document] {
    &splits.test[..splits.test.len().min(cfg.eval.max_docs)]
}

/// Serializes the train and valid splits under `paratype` and trains a
/// fresh model. Returns the paratype codec (embedded in the checkpoint),
/// the outcome and the wall time in seconds.
pub fn train_paratype(cfg: &ExperimentConfig, base: &Codec, splits: &Splits, paratype: ParaType) -> Result<(Codec, TrainOutcome, f64)> {
    let codec = base.for_paratype(paratype);
    let train_seqs = stage("serialize", training_seqs(&codec, &splits.train, paratype, cfg.append_eos))?;
    let valid_seqs = stage("serialize", training_seqs(&codec, &splits.valid, paratype, cfg.append_eos))?;
    let model_cfg = ModelConfig {
        vocab_size: codec.vocab().len(),
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    let train_cfg = cfg.resolved_train(train_seqs.len());
    info!(
        "{paratype}: training on {} sequences ({} validation), warmup {}",
        train_seqs.len(),
        valid_seqs.len(),
        train_cfg.warmup_steps
    );
    let t0 = Instant::now();
    let outcome = stage("train", lm::train(&model_cfg, &train_cfg, &train_seqs, &valid_seqs, Some(codec.clone())))?;
    Ok((codec, outcome, t0.elapsed().as_secs_f64()))
}

/// Builds a report from whichever inputs are present. Perplexities come
/// from `logprobs`, generation metrics from `generations` paired with
/// `docs`.
pub fn evaluate(
    codec: &Codec,
    docs: &[Document],
    paratype: ParaType,
    logprobs: &[DocLogprobs],
    generations: &[GenerationRecord],
    unit: Unit,
    has_eos: bool,
) -> Result<EvalReport> {
    let pairs = gen_pairs(codec, docs, generations, paratype, unit)?;
    build_report(&ReportInputs {
        paratype,
        logprobs,
        specials: SpecialIds::from_vocab(codec.vocab()),
        has_eos,
        generations: &pairs,
    })
}

/// Serialize, train, generate and evaluate one paratype. `splits` must
/// already be length-filtered. Artifacts go to `dir` when given.
pub fn run_paratype(cfg: &ExperimentConfig, base: &Codec, splits: &Splits, paratype: ParaType, dir: Option<&Path>) -> Result<ParatypeRun> {
    let (codec, outcome, train_secs) = train_paratype(cfg, base, splits, paratype)?;
    let model = stage("train", outcome.checkpoint.model())?;
    let test = eval_docs(cfg, splits);
    let gen_cfg = GenConfig {
        seed: cfg.seed,
        ..cfg.generation.clone()
    };
    let generations = stage("generate", generate_docs(&model, &codec, test, &gen_cfg, paratype.as_str()))?;
    let logprobs = stage("eval", score_docs(&model, &codec, test, paratype))?;
    let report = stage(
        "eval",
        evaluate(&codec, test, paratype, &logprobs, &generations, cfg.eval.bleu_unit, cfg.append_eos),
    )?;
    let rank = if cfg.eval.rank_curve && cfg.append_eos {
        Some(stage("rank-curve", rank_curve(&model, &codec, test, paratype, cfg.eval.marker_inclusive))?)
    } else {
        None
    };

    if let Some(dir) = dir {
        stage("write", (|| {
            outcome.checkpoint.save(&dir.join("model.ckpt"))?;
            write(&dir.join("train_curve.csv"), &curve_csv(&outcome.curve))?;
            crate::decoder::write_generations(&dir.join("generations.jsonl"), &generations)?;
            metrics::write_logprobs(&dir.join("logprobs.jsonl"), &logprobs)?;
            write(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            if let Some(r) = &rank {
                write(&dir.join("rank_curve.csv"), &r.to_csv())?;
            }
            Ok(())
        })())?;
    }
    info!(
        "{paratype}: {train_secs:.0}s training, eos_ppl {:?}, eos_rate {:?}",
        report.eos_ppl, report.eos_rate
    );
    Ok(ParatypeRun {
        paratype,
        checkpoint: outcome.checkpoint,
        report,
        rank_curve: rank,
        generations,
        train_secs,
    })
}

/// Loads and length-filters the corpus and builds the base codec.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Codec, Splits)> {
    cfg.validate()?;
    let raw = stage("load", load_splits(cfg))?;
    let codec = stage("train-codec", build_codec(&cfg.codec, &raw.train))?;
    let max = cfg.max_tokens();
    let fit = |docs: &[Document]| fit_documents(docs, &codec, &cfg.paratypes, max);
    let splits = stage("prep", (|| {
        Ok(Splits {
            train: fit(&raw.train)?,
            valid: fit(&raw.valid)?,
            test: fit(&raw.test)?,
        })
    })())?;
    info!(
        "kept {}/{} train, {}/{} valid, {}/{} test documents within {max} tokens",
        splits.train.len(),
        raw.train.len(),
        splits.valid.len(),
        raw.valid.len(),
        splits.test.len(),
        raw.test.len()
    );
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::Stage {
            stage: "prep".into(),
            source: Box::new(Error::Invalid(format!("no documents fit in {max} tokens"))),
        });
    }
    Ok((codec, splits))
}

/// Runs every paratype and writes `comparison.csv` (one row per paratype,
/// in config order) plus per-paratype artifacts under `out_dir/<paratype>/`.
pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let (codec, splits) = prepare(cfg)?;
    let out = &cfg.out_dir;
    stage("write", (|| {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        cfg.save(&out.join("experiment.json"))?;
        codec.save(&out.join("codec.json"))
    })())?;
    let mut reports = Vec::with_capacity(cfg.paratypes.len());
    for &pt in &cfg.paratypes {
        let dir = out.join(pt.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        reports.push(run_paratype(cfg, &codec, &splits, pt, Some(&dir))?.report);
    }
    stage("write", write(&out.join("comparison.csv"), &EvalReport::table_csv(&reports)))?;
    Ok(reports)
}
