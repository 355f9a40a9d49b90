//! Rank of EOS in the next-token distribution at paragraph ends, bucketed by
//! relative paragraph position.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{next_token_logprobs, Transformer};

/// 1 + the number of tokens ahead of `eos`: those with strictly higher
/// probability, plus equal-probability tokens with a smaller id.
pub fn eos_rank(dist: &[f64], eos: u32) -> usize {
    let e = dist[eos as usize];
    1 + dist
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > e || (q == e && (i as u32) < eos))
        .count()
}

/// A serialized document (prompt segment included) with the absolute index
/// of each paragraph's last token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankDoc {
    pub ids: Vec<u32>,
    pub marks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub bucket: u32,
    pub mean_rank: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankCurve {
    sums: BTreeMap<u32, (f64, usize)>,
}

/// Relative position of paragraph `i` of `n`, in 0..=100.
pub fn bucket_of(i: usize, n: usize) -> u32 {
    if n <= 1 {
        100
    } else {
        (100.0 * i as f64 / (n - 1) as f64).round() as u32
    }
}

impl RankCurve {
    pub fn add(&mut self, bucket: u32, rank: usize) {
        let e = self.sums.entry(bucket).or_insert((0.0, 0));
        e.0 += rank as f64;
        e.1 += 1;
    }

    pub fn mean(&self, bucket: u32) -> Option<f64> {
        self.sums.get(&bucket).map(|(s, c)| s / *c as f64)
    }

    pub fn rows(&self) -> Vec<RankRow> {
        self.sums
            .iter()
            .map(|(&bucket, &(s, count))| RankRow {
                bucket,
                mean_rank: s / count as f64,
                count,
            })
            .collect()
    }

    /// Sample-weighted mean rank over buckets in `lo..=hi`.
    pub fn mean_over(&self, lo: u32, hi: u32) -> Option<f64> {
        let (s, c) = self
            .sums
            .range(lo..=hi)
            .fold((0.0, 0), |(s, c), (_, &(bs, bc))| (s + bs, c + bc));
        (c > 0).then(|| s / c as f64)
    }

    /// `bucket,mean_rank,count` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,mean_rank,count\n");
        for r in self.rows() {
            writeln!(out, "{},{},{}", r.bucket, r.mean_rank, r.count).unwrap();
        }
        out
    }
}

/// Rank curve from per-document next-token log-distributions supplied by
/// `dist` (one row per input token). With `marker_inclusive` off, the query
/// moves back from a marker token to the paragraph's last content token.
pub fn rank_curve_with<F>(docs: &[RankDoc], eos: u32, markers: &[u32], marker_inclusive: bool, mut dist: F) -> Result<RankCurve>
where
    F: FnMut(&[u32]) -> Result<Vec<Vec<f64>>>,
{
    let mut curve = RankCurve::default();
    for (d, doc) in docs.iter().enumerate() {
        let n = doc.marks.len();
        let Some(&last) = doc.marks.last() else {
            return Err(Error::Metric(format!("document {d} has no boundary marks")));
        };
        if last >= doc.ids.len() {
            return Err(Error::Metric(format!("document {d}: boundary mark {last} past the end")));
        }
        let rows = dist(&doc.ids[..=last])?;
        for (i, &m) in doc.marks.iter().enumerate() {
            let pos = if !marker_inclusive && m > 0 && markers.contains(&doc.ids[m]) {
                m - 1
            } else {
                m
            };
            let row = &rows[pos];
            if eos as usize >= row.len() {
                return Err(Error::Metric(format!("EOS id {eos} outside a vocabulary of {}", row.len())));
            }
            curve.add(bucket_of(i, n), eos_rank(row, eos));
        }
    }
    Ok(curve)
}

/// Rank curve under `model`.
pub fn eos_rank_curve(model: &Transformer<f32>, docs: &[RankDoc], eos: u32, markers: &[u32], marker_inclusive: bool) -> Result<RankCurve> {
    rank_curve_with(docs, eos, markers, marker_inclusive, |ids| next_token_logprobs(model, ids))
}
