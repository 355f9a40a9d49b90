//! `plmw`: command-line front end for the paragraph-marker workbench.
//!
//! Every subcommand reads and writes files only; logs go to stderr
//! (info level unless `RUST_LOG` says otherwise). A failing run exits
//! non-zero with the failing stage named in the message.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use plmw::corpus::{self, CorpusFormat, Document, SynthConfig};
use plmw::decoder::{self, GenConfig};
use plmw::experiment::{self, stage, CorpusSource, ExperimentConfig};
use plmw::humaneval;
use plmw::metrics::{self, Unit};
use plmw::{Checkpoint, Codec, CodecMode, Error, EvalReport, ParaType, Result, SplitSpec};

#[derive(Parser)]
#[command(name = "plmw", version, about = "Paragraph-marker language-model workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Corpus file (jsonl) or two-file prefix.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    format: CorpusFormat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the seeded synthetic corpus as jsonl.
    SynthCorpus {
        #[arg(long)]
        n_docs: Option<usize>,
    },
    /// Length-filter a corpus and write it with summary statistics.
    Prep {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Codec used to count tokens.
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, default_value_t = 1024)]
        max_tokens: usize,
        /// Paratypes the length must fit under (default: all five).
        #[arg(long = "paratype")]
        paratypes: Vec<ParaType>,
        /// Also split into train/valid/test, e.g. "0.8,0.1,0.1".
        #[arg(long)]
        split: Option<String>,
    },
    /// Train a char or BPE codec.
    TrainCodec {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value = "bpe")]
        mode: CodecMode,
        #[arg(long, default_value_t = 300)]
        vocab_size: usize,
    },
    /// Train one paratype's model from an experiment config.
    Train {
        #[arg(long)]
        paratype: ParaType,
    },
    /// Sample one continuation per document prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        max_docs: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// System label stored with each generation.
        #[arg(long, default_value = "model")]
        system: String,
    },
    /// Compute a report row. With --logprobs and --codec no model is needed.
    Eval {
        #[arg(long)]
        paratype: ParaType,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Codec for metric-only mode (ignored when a checkpoint is given).
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Precomputed logprob dump.
        #[arg(long)]
        logprobs: Option<PathBuf>,
        #[arg(long)]
        generations: Option<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        max_docs: Option<usize>,
        #[arg(long, default_value = "word")]
        bleu_unit: UnitArg,
        /// The model was trained without EOS.
        #[arg(long)]
        no_eos: bool,
        /// Also write the computed logprobs here.
        #[arg(long)]
        dump_logprobs: Option<PathBuf>,
    },
    /// EOS rank against relative paragraph position, as CSV.
    RankCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        paratype: ParaType,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        max_docs: Option<usize>,
        /// Query at the last content token rather than the marker.
        #[arg(long)]
        exclude_marker: bool,
    },
    /// Run every configured paratype end to end and write comparison.csv.
    Compare,
    /// Serve the human-evaluation HTTP API.
    StudyServe {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, env = "PLMW_ADMIN_TOKEN")]
        admin_token: String,
        /// Drop tasks holding an "indistinguishable" verdict from kappa
        /// instead of counting it as a third category.
        #[arg(long)]
        drop_ties: bool,
    },
    /// Aggregate a study's judgment log offline.
    StudyReport {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        /// As for study-serve.
        #[arg(long)]
        drop_ties: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum UnitArg {
    Word,
    Token,
}

impl From<UnitArg> for Unit {
    fn from(u: UnitArg) -> Unit {
        match u {
            UnitArg::Word => Unit::Word,
            UnitArg::Token => Unit::Token,
        }
    }
}

const ALL_PARATYPES: [ParaType; 5] = [
    ParaType::None,
    ParaType::SepNl,
    ParaType::SepDiy,
    ParaType::EopNl,
    ParaType::EopDiy,
];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cmd_name(&cli.cmd);
    match stage(name, run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::SynthCorpus { .. } => "synth-corpus",
        Cmd::Prep { .. } => "prep",
        Cmd::TrainCodec { .. } => "train-codec",
        Cmd::Train { .. } => "train",
        Cmd::Generate { .. } => "generate",
        Cmd::Eval { .. } => "eval",
        Cmd::RankCurve { .. } => "rank-curve",
        Cmd::Compare => "compare",
        Cmd::StudyServe { .. } => "study-serve",
        Cmd::StudyReport { .. } => "study-report",
    }
}

/// The config named by --config (or the defaults), with --seed applied.
fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", dir.display())))
}

/// Documents from --input, or else the evaluation documents of --config.
fn documents(common: &Common, corpus: &CorpusArgs, max_docs: Option<usize>) -> Result<Vec<Document>> {
    let mut docs = match &corpus.input {
        Some(p) => corpus::load_corpus(p, corpus.format)?,
        None if common.config.is_some() => {
            let cfg = config(common)?;
            let (_, splits) = experiment::prepare(&cfg)?;
            experiment::eval_docs(&cfg, &splits).to_vec()
        }
        None => return Err(Error::Config("give --input or --config".into())),
    };
    if let Some(n) = max_docs {
        docs.truncate(n);
    }
    Ok(docs)
}

fn checkpoint_codec(ckpt: &Checkpoint) -> Result<Codec> {
    ckpt.codec
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no codec".into()))
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.cmd {
        Cmd::SynthCorpus { n_docs } => {
            let cfg = config(&common)?;
            let mut synth = match &cfg.corpus {
                CorpusSource::Synth { config, .. } => config.clone(),
                CorpusSource::Files { .. } => SynthConfig::default(),
            };
            synth.seed = cfg.seed;
            if let Some(n) = n_docs {
                synth.n_docs = n;
            }
            let docs = corpus::synth_corpus(&synth)?;
            let out = out_path(&common, "synth.jsonl");
            corpus::write_corpus(&out, &docs)?;
            info!("wrote {} documents to {}", docs.len(), out.display());
        }
        Cmd::Prep {
            corpus: c,
            codec,
            max_tokens,
            paratypes,
            split,
        } => {
            let input = c.input.ok_or_else(|| Error::Config("prep needs --input".into()))?;
            let docs = corpus::load_corpus(&input, c.format)?;
            let codec = Codec::load(&codec)?;
            let pts = if paratypes.is_empty() { ALL_PARATYPES.to_vec() } else { paratypes };
            let kept = experiment::fit_documents(&docs, &codec, &pts, max_tokens)?;
            info!("kept {}/{} documents within {max_tokens} tokens", kept.len(), docs.len());
            let dir = out_path(&common, "prep");
            ensure_dir(&dir)?;
            corpus::write_corpus(&dir.join("corpus.jsonl"), &kept)?;
            let stats = serde_json::json!({
                "max_tokens": max_tokens,
                "paratypes": pts,
                "input": corpus::compute_stats(&docs)?,
                "kept": corpus::compute_stats(&kept)?,
            });
            write(&dir.join("stats.json"), &serde_json::to_string_pretty(&stats)?)?;
            if let Some(s) = split {
                let f: Vec<f64> = s
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad --split {s:?}")))?;
                let [train_frac, valid_frac, test_frac] = f[..] else {
                    return Err(Error::Config(format!("--split needs three fractions, got {s:?}")));
                };
                let spec = SplitSpec {
                    train_frac,
                    valid_frac,
                    test_frac,
                    seed: common.seed.unwrap_or(0),
                };
                let (tr, va, te) = corpus::split_corpus(&kept, &spec)?;
                corpus::write_corpus(&dir.join("train.jsonl"), &tr)?;
                corpus::write_corpus(&dir.join("valid.jsonl"), &va)?;
                corpus::write_corpus(&dir.join("test.jsonl"), &te)?;
            }
        }
        Cmd::TrainCodec { corpus: c, mode, vocab_size } => {
            let docs = match &c.input {
                Some(p) => corpus::load_corpus(p, c.format)?,
                None => experiment::load_splits(&config(&common)?)?.train,
            };
            let codec = Codec::train(&docs, mode, vocab_size, &[])?;
            let out = out_path(&common, "codec.json");
            codec.save(&out)?;
            info!("codec with {} tokens written to {}", codec.vocab().len(), out.display());
        }
        Cmd::Train { paratype } => {
            let cfg = config(&common)?;
            let (codec, splits) = experiment::prepare(&cfg)?;
            let (_, outcome, secs) = experiment::train_paratype(&cfg, &codec, &splits, paratype)?;
            let dir = common.out.clone().unwrap_or_else(|| cfg.out_dir.join(paratype.as_str()));
            ensure_dir(&dir)?;
            outcome.checkpoint.save(&dir.join("model.ckpt"))?;
            write(&dir.join("train_curve.csv"), &experiment::curve_csv(&outcome.curve))?;
            info!(
                "trained in {secs:.0}s; best step {} (valid NLL {:?})",
                outcome.best_step, outcome.best_valid_nll
            );
        }
        Cmd::Generate {
            checkpoint,
            corpus: c,
            max_docs,
            p,
            max_new_tokens,
            temperature,
            system,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let codec = checkpoint_codec(&ckpt)?;
            let model = ckpt.model()?;
            let base = match &common.config {
                Some(_) => config(&common)?.generation,
                None => GenConfig {
                    max_new_tokens: model.cfg.context_len,
                    ..GenConfig::default()
                },
            };
            let seed = match (common.seed, &common.config) {
                (Some(s), _) => s,
                (None, Some(_)) => config(&common)?.seed,
                (None, None) => 0,
            };
            let gen = GenConfig {
                p: p.unwrap_or(base.p),
                max_new_tokens: max_new_tokens.unwrap_or(base.max_new_tokens),
                temperature: temperature.unwrap_or(base.temperature),
                seed,
            };
            gen.validate()?;
            let docs = documents(&common, &c, max_docs)?;
            let records = experiment::generate_docs(&model, &codec, &docs, &gen, &system)?;
            let ended = records.iter().filter(|r| r.ended_with_eos).count();
            let out = out_path(&common, "generations.jsonl");
            decoder::write_generations(&out, &records)?;
            info!("{} generations ({ended} ended with EOS) written to {}", records.len(), out.display());
        }
        Cmd::Eval {
            paratype,
            checkpoint,
            codec,
            logprobs,
            generations,
            corpus: c,
            max_docs,
            bleu_unit,
            no_eos,
            dump_logprobs,
        } => {
            let (model, codec) = match (&checkpoint, &codec) {
                (Some(p), _) => {
                    let ckpt = Checkpoint::load(p)?;
                    (Some(ckpt.model()?), checkpoint_codec(&ckpt)?)
                }
                (None, Some(p)) => (None, Codec::load(p)?.for_paratype(paratype)),
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --codec".into())),
            };
            let gens = match &generations {
                Some(p) => decoder::read_generations(p)?,
                None => Vec::new(),
            };
            let need_docs = !gens.is_empty() || (logprobs.is_none() && model.is_some());
            let docs = if need_docs { documents(&common, &c, max_docs)? } else { Vec::new() };
            let lp = match (&logprobs, &model) {
                (Some(p), _) => metrics::read_logprobs(p)?,
                (None, Some(m)) => experiment::score_docs(m, &codec, &docs, paratype)?,
                (None, None) => Vec::new(),
            };
            if lp.is_empty() && gens.is_empty() {
                return Err(Error::Config("nothing to evaluate: give logprobs, a checkpoint with documents, or generations".into()));
            }
            if let Some(p) = &dump_logprobs {
                metrics::write_logprobs(p, &lp)?;
            }
            let report = experiment::evaluate(&codec, &docs, paratype, &lp, &gens, bleu_unit.into(), !no_eos)?;
            let out = out_path(&common, "report.json");
            write(&out, &serde_json::to_string_pretty(&report)?)?;
            write(&out.with_extension("csv"), &EvalReport::table_csv(std::slice::from_ref(&report)))?;
            info!("report written to {}", out.display());
        }
        Cmd::RankCurve {
            checkpoint,
            paratype,
            corpus: c,
            max_docs,
            exclude_marker,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let codec = checkpoint_codec(&ckpt)?;
            let model = ckpt.model()?;
            let docs = documents(&common, &c, max_docs)?;
            let curve = experiment::rank_curve(&model, &codec, &docs, paratype, !exclude_marker)?;
            let out = out_path(&common, "rank_curve.csv");
            write(&out, &curve.to_csv())?;
            info!("rank curve over {} documents written to {}", docs.len(), out.display());
        }
        Cmd::Compare => {
            let mut cfg = config(&common)?;
            if let Some(o) = &common.out {
                cfg.out_dir = o.clone();
            }
            let reports = experiment::compare(&cfg)?;
            info!(
                "{} rows written to {}",
                reports.len(),
                cfg.out_dir.join("comparison.csv").display()
            );
        }
        Cmd::StudyServe {
            addr,
            data_dir,
            admin_token,
            drop_ties,
        } => {
            if data_dir.is_none() {
                warn!("no --data-dir: studies and judgments live in memory only");
            }
            let state = humaneval::AppState::new(&admin_token, data_dir, drop_ties)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("runtime: {e}")))?;
            rt.block_on(humaneval::serve(addr, state))?;
        }
        Cmd::StudyReport {
            study,
            judgments,
            drop_ties,
        } => {
            let study = humaneval::Study::load(&study)?;
            let events = humaneval::read_events(&judgments)?;
            let latest = humaneval::latest_judgments(&events);
            for j in &latest {
                study.check(j)?;
            }
            let report = humaneval::study_report(&study, &latest, drop_ties);
            let out = out_path(&common, "study_report.json");
            write(&out, &serde_json::to_string_pretty(&report)?)?;
            info!("report over {} judgments written to {}", latest.len(), out.display());
        }
    }
    Ok(())
}
