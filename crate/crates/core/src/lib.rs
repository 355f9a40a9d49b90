//! Paragraph-marker language-model workbench.
//!
//! The crate covers the whole pipeline for studying how end-of-paragraph and
//! end-of-sequence markers change autoregressive generation:
//!
//! * [`corpus`] loads, filters, splits and summarizes prompt/paragraph corpora,
//!   and generates the seeded synthetic corpus.
//! * [`textcodec`] trains character or BPE codecs and serializes documents
//!   under the five [`ParaType`] schemes.
//! * [`lm`] is a small pre-LN decoder-only transformer with hand-written
//!   backpropagation, an Adam training loop and a finite-difference checker.
//! * [`decoder`] implements nucleus sampling and EOS-terminated generation.
//! * [`metrics`] computes the perplexity family, EOS statistics, BLEU,
//!   truncated BLEU, distinct-n, average length and the EOS rank curve.
//! * [`humaneval`] runs blinded pairwise studies with win matrices and
//!   Fleiss' kappa, including the HTTP service.
//! * [`experiment`] wires the stages together for the command-line tool.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod humaneval;
pub mod lm;
pub mod metrics;
pub mod rng;
pub mod textcodec;

pub use corpus::{CorpusStats, Document, Lang, SplitSpec};
pub use decoder::{GenConfig, Generation};
pub use error::{Error, Result};
pub use lm::{Checkpoint, ModelConfig, TrainConfig};
pub use metrics::{EvalReport, RankCurve};
pub use textcodec::{Codec, CodecMode, ParaType, Special, TokenSeq, Vocab};
