//! One row of the comparison table.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{avg_length, bleu, distinct_n, eos_rate, perplexity, truncated_bleu, DocLogprobs, Selector, SpecialIds, Unit};
use crate::error::{Error, Result};
use crate::textcodec::ParaType;

pub const REPORT_SCHEMA: u32 = 1;

/// CSV column order.
pub const REPORT_COLUMNS: [&str; 14] = [
    "paratype",
    "w_ppl",
    "w_ppl_minus",
    "t_ppl",
    "t_ppl_minus",
    "eos_ppl",
    "eos_rate",
    "bleu1",
    "bleu2",
    "t_bleu1",
    "t_bleu2",
    "dist1",
    "dist2",
    "avg_length",
];

/// Metric values for one (model, paratype) run. `None` marks a value that
/// does not apply or had no input; it is written as `-` in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub paratype: ParaType,
    pub w_ppl: Option<f64>,
    pub w_ppl_minus: Option<f64>,
    pub t_ppl: Option<f64>,
    pub t_ppl_minus: Option<f64>,
    pub eos_ppl: Option<f64>,
    pub eos_rate: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub t_bleu1: Option<f64>,
    pub t_bleu2: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub avg_length: Option<f64>,
    /// How BLEU and distinct-n were aggregated.
    pub aggregation: String,
}

/// A generation paired with its reference, both as content units (words or
/// tokens) with specials already stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenPair {
    pub doc_id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub ended_with_eos: bool,
}

#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub paratype: ParaType,
    pub logprobs: &'a [DocLogprobs],
    pub specials: SpecialIds,
    /// False for a model trained without EOS; EOS statistics are then absent.
    pub has_eos: bool,
    pub generations: &'a [GenPair],
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Metric(format!("bad report cell {s:?}")))
}

impl EvalReport {
    fn values(&self) -> [Option<f64>; 13] {
        [
            self.w_ppl,
            self.w_ppl_minus,
            self.t_ppl,
            self.t_ppl_minus,
            self.eos_ppl,
            self.eos_rate,
            self.bleu1,
            self.bleu2,
            self.t_bleu1,
            self.t_bleu2,
            self.dist1,
            self.dist2,
            self.avg_length,
        ]
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cells = vec![self.paratype.as_str().to_string()];
        cells.extend(self.values().iter().map(|v| fmt_cell(*v)));
        cells.join(",")
    }

    pub fn from_csv_row(row: &str) -> Result<EvalReport> {
        let cells: Vec<&str> = row.trim_end().split(',').collect();
        if cells.len() != REPORT_COLUMNS.len() {
            return Err(Error::Metric(format!(
                "expected {} report columns, found {}",
                REPORT_COLUMNS.len(),
                cells.len()
            )));
        }
        let v = cells[1..].iter().map(|c| parse_cell(c)).collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            schema: REPORT_SCHEMA,
            paratype: cells[0].parse()?,
            w_ppl: v[0],
            w_ppl_minus: v[1],
            t_ppl: v[2],
            t_ppl_minus: v[3],
            eos_ppl: v[4],
            eos_rate: v[5],
            bleu1: v[6],
            bleu2: v[7],
            t_bleu1: v[8],
            t_bleu2: v[9],
            dist1: v[10],
            dist2: v[11],
            avg_length: v[12],
            aggregation: default_aggregation(),
        })
    }

    /// Header plus one row per report.
    pub fn table_csv(reports: &[EvalReport]) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in reports {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

fn default_aggregation() -> String {
    "bleu: sentence-level macro; distinct: per-sequence macro".into()
}

/// Assembles a report. Perplexities need logprobs and the generation
/// metrics need generations; whichever input is empty leaves its fields
/// absent. When both are present they must cover the same documents.
pub fn build_report(inputs: &ReportInputs) -> Result<EvalReport> {
    let lp = inputs.logprobs;
    let gens = inputs.generations;
    if !lp.is_empty() && !gens.is_empty() {
        let a: BTreeSet<&str> = lp.iter().map(|d| d.doc_id.as_str()).collect();
        let b: BTreeSet<&str> = gens.iter().map(|g| g.doc_id.as_str()).collect();
        if a != b {
            return Err(Error::Metric(format!(
                "logprobs cover {} documents and generations {}, and the id sets differ",
                a.len(),
                b.len()
            )));
        }
    }
    let sp = &inputs.specials;
    let ppl = |sel, unit| -> Result<Option<f64>> {
        if lp.is_empty() {
            Ok(None)
        } else {
            perplexity(lp, sel, unit, sp).map(Some)
        }
    };
    let mut report = EvalReport {
        schema: REPORT_SCHEMA,
        paratype: inputs.paratype,
        w_ppl: ppl(Selector::All, Unit::Word)?,
        w_ppl_minus: ppl(Selector::ExcludeSpecials, Unit::Word)?,
        t_ppl: ppl(Selector::All, Unit::Token)?,
        t_ppl_minus: ppl(Selector::ExcludeSpecials, Unit::Token)?,
        eos_ppl: if inputs.has_eos {
            ppl(Selector::EosOnly, Unit::Token)?
        } else {
            None
        },
        eos_rate: None,
        bleu1: None,
        bleu2: None,
        t_bleu1: None,
        t_bleu2: None,
        dist1: None,
        dist2: None,
        avg_length: None,
        aggregation: default_aggregation(),
    };
    if !gens.is_empty() {
        let cands: Vec<Vec<String>> = gens.iter().map(|g| g.candidate.clone()).collect();
        let refs: Vec<Vec<String>> = gens.iter().map(|g| g.reference.clone()).collect();
        if inputs.has_eos {
            let ended: Vec<bool> = gens.iter().map(|g| g.ended_with_eos).collect();
            report.eos_rate = Some(eos_rate(&ended)?);
        }
        report.bleu1 = Some(bleu(&cands, &refs, 1)?);
        report.bleu2 = Some(bleu(&cands, &refs, 2)?);
        report.t_bleu1 = Some(truncated_bleu(&cands, &refs, 1)?);
        report.t_bleu2 = Some(truncated_bleu(&cands, &refs, 2)?);
        report.dist1 = distinct_n(&cands, 1).ok();
        report.dist2 = distinct_n(&cands, 2).ok();
        report.avg_length = Some(avg_length(&cands)?);
    }
    Ok(report)
}
