//! Blinded pairwise human evaluation: study construction, judgment
//! storage, win matrices and Fleiss' kappa.

mod server;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use server::{router, serve, AppState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TopicRelevance,
    Fluency,
    EndingQuality,
    OverallPreference,
}

pub const METRICS: [Metric; 4] = [
    Metric::TopicRelevance,
    Metric::Fluency,
    Metric::EndingQuality,
    Metric::OverallPreference,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Left,
    Right,
    Indistinguishable,
}

/// A prompt with one generation per system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub prompt: String,
    pub generations: BTreeMap<String, String>,
}

/// One comparison. Which system sits on which side is never sent to raters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTask {
    pub task_id: usize,
    pub sample_id: String,
    pub left_system: String,
    pub right_system: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub systems: Vec<String>,
    pub samples: Vec<Sample>,
    pub metrics: Vec<Metric>,
    pub raters: Vec<String>,
    pub tasks: Vec<PairTask>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: usize,
    pub rater_id: String,
    pub metric: Metric,
    pub verdict: Verdict,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

/// Builds a study: `sample_count` documents drawn without replacement, one
/// task per unordered system pair and sample, sides assigned by a fair coin,
/// every task given to every rater.
pub fn create_study(
    id: &str,
    systems: &[String],
    samples: &[Sample],
    sample_count: usize,
    raters: &[String],
    seed: u64,
) -> Result<Study> {
    let distinct: BTreeSet<&String> = systems.iter().collect();
    if systems.len() < 2 || distinct.len() != systems.len() {
        return Err(Error::Study("a study needs at least two distinct systems".into()));
    }
    let rater_set: BTreeSet<&String> = raters.iter().collect();
    if raters.is_empty() || rater_set.len() != raters.len() {
        return Err(Error::Study("rater ids must be non-empty and distinct".into()));
    }
    if sample_count == 0 || sample_count > samples.len() {
        return Err(Error::Study(format!(
            "cannot draw {sample_count} samples from {}",
            samples.len()
        )));
    }
    let mut rng = Rng::derive(seed, 0x57);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let chosen: Vec<Sample> = order[..sample_count].iter().map(|&i| samples[i].clone()).collect();
    for s in &chosen {
        for sys in systems {
            if !s.generations.contains_key(sys) {
                return Err(Error::Study(format!("missing generation for system {sys} on sample {}", s.id)));
            }
        }
    }
    let mut tasks = Vec::new();
    for s in &chosen {
        for i in 0..systems.len() {
            for j in i + 1..systems.len() {
                let (l, r) = if rng.coin() { (i, j) } else { (j, i) };
                tasks.push(PairTask {
                    task_id: tasks.len(),
                    sample_id: s.id.clone(),
                    left_system: systems[l].clone(),
                    right_system: systems[r].clone(),
                });
            }
        }
    }
    Ok(Study {
        id: id.to_string(),
        systems: systems.to_vec(),
        samples: chosen,
        metrics: METRICS.to_vec(),
        raters: raters.to_vec(),
        tasks,
        seed,
    })
}

impl Study {
    pub fn task(&self, task_id: usize) -> Option<&PairTask> {
        self.tasks.get(task_id).filter(|t| t.task_id == task_id)
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn check(&self, j: &Judgment) -> Result<()> {
        if self.task(j.task_id).is_none() {
            return Err(Error::Study(format!("task {} not in study", j.task_id)));
        }
        if !self.raters.contains(&j.rater_id) {
            return Err(Error::Study("rater not in study".into()));
        }
        if !self.metrics.contains(&j.metric) {
            return Err(Error::Study(format!("metric {:?} not in study", j.metric)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Study> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

type JudgmentKey = (usize, String, Metric);

/// Latest judgment per (task, rater, metric), optionally backed by an
/// append-only jsonl event log.
#[derive(Debug, Default)]
pub struct JudgmentStore {
    latest: BTreeMap<JudgmentKey, Judgment>,
    log: Option<PathBuf>,
}

impl JudgmentStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the log at `path`, replaying existing events.
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = JudgmentStore {
            latest: BTreeMap::new(),
            log: Some(path.to_path_buf()),
        };
        if path.exists() {
            for j in read_events(path)? {
                store.apply(j);
            }
        }
        Ok(store)
    }

    fn apply(&mut self, j: Judgment) {
        self.latest.insert((j.task_id, j.rater_id.clone(), j.metric), j);
    }

    /// Validates, appends to the log, then upserts.
    pub fn record(&mut self, study: &Study, j: Judgment) -> Result<()> {
        study.check(&j)?;
        if let Some(path) = &self.log {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", serde_json::to_string(&j)?).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        self.apply(j);
        Ok(())
    }

    pub fn judgments(&self) -> Vec<Judgment> {
        self.latest.values().cloned().collect()
    }

    pub fn has(&self, task_id: usize, rater: &str, metric: Metric) -> bool {
        self.latest.contains_key(&(task_id, rater.to_string(), metric))
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Judgment>> {
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

/// Collapses an event sequence to the latest judgment per key.
pub fn latest_judgments(events: &[Judgment]) -> Vec<Judgment> {
    let mut store = JudgmentStore::in_memory();
    for j in events {
        store.apply(j.clone());
    }
    store.judgments()
}

/// Per metric, `cells[row][col]` is the percentage of decided comparisons
/// between the two systems that `row` won; `None` on the diagonal and where
/// nothing was decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub systems: Vec<String>,
    pub cells: BTreeMap<Metric, Vec<Vec<Option<f64>>>>,
    pub wins: BTreeMap<Metric, Vec<Vec<usize>>>,
    /// Pairs with no decided comparison, per metric.
    pub undecided: Vec<(Metric, String, String)>,
}

/// Win matrices; "indistinguishable" verdicts are skipped.
pub fn win_matrix(study: &Study, judgments: &[Judgment]) -> WinMatrix {
    let k = study.systems.len();
    let index: BTreeMap<&str, usize> = study.systems.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut wins: BTreeMap<Metric, Vec<Vec<usize>>> = study.metrics.iter().map(|&m| (m, vec![vec![0; k]; k])).collect();
    for j in judgments {
        let Some(task) = study.task(j.task_id) else { continue };
        let (l, r) = (index[task.left_system.as_str()], index[task.right_system.as_str()]);
        let Some(w) = wins.get_mut(&j.metric) else { continue };
        match j.verdict {
            Verdict::Left => w[l][r] += 1,
            Verdict::Right => w[r][l] += 1,
            Verdict::Indistinguishable => {}
        }
    }
    let mut cells = BTreeMap::new();
    let mut undecided = Vec::new();
    for (&m, w) in &wins {
        let mut grid = vec![vec![None; k]; k];
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let decided = w[a][b] + w[b][a];
                if decided == 0 {
                    if a < b {
                        undecided.push((m, study.systems[a].clone(), study.systems[b].clone()));
                    }
                } else {
                    grid[a][b] = Some(100.0 * w[a][b] as f64 / decided as f64);
                }
            }
        }
        cells.insert(m, grid);
    }
    WinMatrix {
        systems: study.systems.clone(),
        cells,
        wins,
        undecided,
    }
}

/// Fleiss' kappa from per-item category counts; every item must have the
/// same number of ratings, at least 2. Returns the statistic and whether
/// all ratings fell in one category (reported as 1.0).
pub fn fleiss_kappa_counts(counts: &[Vec<usize>]) -> Result<(f64, bool)> {
    if counts.len() < 2 {
        return Err(Error::Study(format!("kappa needs at least 2 complete items, found {}", counts.len())));
    }
    let n: usize = counts[0].iter().sum();
    if n < 2 {
        return Err(Error::Study("kappa needs at least 2 raters per item".into()));
    }
    let cats = counts[0].len();
    if counts.iter().any(|c| c.len() != cats || c.iter().sum::<usize>() != n) {
        return Err(Error::Study("items have unequal numbers of ratings".into()));
    }
    let items = counts.len() as f64;
    let nf = n as f64;
    let p_bar = counts
        .iter()
        .map(|c| (c.iter().map(|&x| (x * x) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..cats)
        .map(|j| {
            let pj = counts.iter().map(|c| c[j]).sum::<usize>() as f64 / (items * nf);
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        return Ok((1.0, true));
    }
    Ok(((p_bar - p_e) / (1.0 - p_e), false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub metric: Metric,
    pub systems: (String, String),
    pub kappa: f64,
    pub band: String,
    pub degenerate: bool,
    pub items: usize,
    /// Tasks left out for lacking a full set of ratings.
    pub excluded: usize,
}

/// Agreement label for a kappa value.
pub fn kappa_band(kappa: f64) -> &'static str {
    if kappa < 0.0 {
        "poor agreement"
    } else if kappa <= 0.20 {
        "slight agreement"
    } else if kappa <= 0.40 {
        "fair agreement"
    } else if kappa <= 0.60 {
        "moderate agreement"
    } else if kappa <= 0.80 {
        "substantial agreement"
    } else {
        "almost perfect agreement"
    }
}

/// Fleiss' kappa over the tasks comparing `pair` on `metric`. Categories
/// are the blinded sides (left, right, indistinguishable). A task counts
/// only when every rater judged it; with `drop_ties`, a task holding any
/// "indistinguishable" verdict is excluded as well and two categories
/// remain.
pub fn fleiss_kappa(
    study: &Study,
    judgments: &[Judgment],
    metric: Metric,
    pair: (&str, &str),
    drop_ties: bool,
) -> Result<KappaResult> {
    let mut per_task: BTreeMap<usize, BTreeMap<&str, Verdict>> = BTreeMap::new();
    for j in judgments.iter().filter(|j| j.metric == metric) {
        per_task.entry(j.task_id).or_default().insert(j.rater_id.as_str(), j.verdict);
    }
    let tasks: Vec<&PairTask> = study
        .tasks
        .iter()
        .filter(|t| {
            (t.left_system == pair.0 && t.right_system == pair.1) || (t.left_system == pair.1 && t.right_system == pair.0)
        })
        .collect();
    let r = study.raters.len();
    let mut counts = Vec::new();
    let mut excluded = 0;
    for t in &tasks {
        let votes = per_task.get(&t.task_id);
        let complete = votes.is_some_and(|v| study.raters.iter().all(|r| v.contains_key(r.as_str())));
        if !complete {
            excluded += 1;
            continue;
        }
        let votes = votes.unwrap();
        let mut c = vec![0usize; if drop_ties { 2 } else { 3 }];
        let mut has_tie = false;
        for rater in &study.raters {
            match votes[rater.as_str()] {
                Verdict::Left => c[0] += 1,
                Verdict::Right => c[1] += 1,
                Verdict::Indistinguishable if drop_ties => has_tie = true,
                Verdict::Indistinguishable => c[2] += 1,
            }
        }
        if has_tie {
            excluded += 1;
            continue;
        }
        debug_assert_eq!(c.iter().sum::<usize>(), r);
        counts.push(c);
    }
    let (kappa, degenerate) = fleiss_kappa_counts(&counts)?;
    Ok(KappaResult {
        metric,
        systems: (pair.0.to_string(), pair.1.to_string()),
        kappa,
        band: kappa_band(kappa).to_string(),
        degenerate,
        items: counts.len(),
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub expected: usize,
    pub received: usize,
    pub per_rater: BTreeMap<String, usize>,
}

/// Everything the admin report endpoint returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub win_matrix: WinMatrix,
    pub kappas: Vec<KappaResult>,
    /// Whether kappa dropped tied tasks rather than counting ties as a
    /// category.
    pub kappa_drops_ties: bool,
    /// Pairs and metrics for which kappa could not be computed.
    pub kappa_errors: Vec<String>,
    pub completion: Completion,
    /// The unblinded side assignment of every task.
    pub mapping: Vec<PairTask>,
}

pub fn study_report(study: &Study, judgments: &[Judgment], drop_ties: bool) -> StudyReport {
    let mut kappas = Vec::new();
    let mut kappa_errors = Vec::new();
    for &m in &study.metrics {
        for i in 0..study.systems.len() {
            for j in i + 1..study.systems.len() {
                let pair = (study.systems[i].as_str(), study.systems[j].as_str());
                match fleiss_kappa(study, judgments, m, pair, drop_ties) {
                    Ok(k) => kappas.push(k),
                    Err(e) => kappa_errors.push(format!("{m:?} {} vs {}: {e}", pair.0, pair.1)),
                }
            }
        }
    }
    let mut per_rater: BTreeMap<String, usize> = study.raters.iter().map(|r| (r.clone(), 0)).collect();
    for j in judgments {
        *per_rater.entry(j.rater_id.clone()).or_default() += 1;
    }
    StudyReport {
        study_id: study.id.clone(),
        win_matrix: win_matrix(study, judgments),
        kappas,
        kappa_drops_ties: drop_ties,
        kappa_errors,
        completion: Completion {
            expected: study.tasks.len() * study.raters.len() * study.metrics.len(),
            received: judgments.len(),
            per_rater,
        },
        mapping: study.tasks.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize, systems: &[&str]) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                prompt: format!("prompt {i}"),
                generations: systems.iter().map(|s| (s.to_string(), format!("{s} text {i}"))).collect(),
            })
            .collect()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn task_counts() {
        let sys = ["a", "b", "c"];
        let st = create_study("x", &names(&sys), &samples(60, &sys), 50, &names(&["r1"]), 1).unwrap();
        assert_eq!(st.tasks.len(), 150);
        let st2 = create_study("x", &names(&sys[..2]), &samples(60, &sys), 50, &names(&["r1"]), 1).unwrap();
        assert_eq!(st2.tasks.len(), 50);
        let again = create_study("x", &names(&sys), &samples(60, &sys), 50, &names(&["r1"]), 1).unwrap();
        assert_eq!(st, again);
        // every unordered pair x sample exactly once
        let mut seen = BTreeSet::new();
        for t in &st.tasks {
            let mut p = [t.left_system.clone(), t.right_system.clone()];
            p.sort();
            assert!(seen.insert((t.sample_id.clone(), p)));
        }
    }

    #[test]
    fn missing_generation_is_named() {
        let mut s = samples(3, &["a", "b"]);
        for x in &mut s {
            x.generations.remove("b");
        }
        let err = create_study("x", &names(&["a", "b"]), &s, 2, &names(&["r"]), 0).unwrap_err();
        assert!(err.to_string().contains("system b"), "{err}");
    }

    fn judge(task: usize, rater: &str, metric: Metric, verdict: Verdict) -> Judgment {
        Judgment {
            task_id: task,
            rater_id: rater.into(),
            metric,
            verdict,
            timestamp: 0,
        }
    }

    #[test]
    fn upsert_and_log_replay() {
        let st = create_study("x", &names(&["a", "b"]), &samples(4, &["a", "b"]), 4, &names(&["r1", "r2"]), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut store = JudgmentStore::open(&path).unwrap();
        store.record(&st, judge(0, "r1", Metric::Fluency, Verdict::Left)).unwrap();
        store.record(&st, judge(0, "r1", Metric::Fluency, Verdict::Right)).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.judgments()[0].verdict, Verdict::Right);
        let err = store.record(&st, judge(0, "zed", Metric::Fluency, Verdict::Left)).unwrap_err();
        assert!(err.to_string().contains("rater not in study"));
        assert!(store.record(&st, judge(99, "r1", Metric::Fluency, Verdict::Left)).is_err());
        let replay = JudgmentStore::open(&path).unwrap();
        assert_eq!(replay.judgments(), store.judgments());
        assert_eq!(read_events(&path).unwrap().len(), 2);
    }

    #[test]
    fn verdict_schema() {
        assert!(serde_json::from_str::<Verdict>("\"both\"").is_err());
        assert_eq!(serde_json::from_str::<Verdict>("\"indistinguishable\"").unwrap(), Verdict::Indistinguishable);
    }

    /// A two-system study whose tasks all put `a` on the left.
    fn fixed_study(tasks: usize, raters: &[&str]) -> Study {
        let mut st = create_study("x", &names(&["a", "b"]), &samples(tasks, &["a", "b"]), tasks, &names(raters), 0).unwrap();
        for t in &mut st.tasks {
            t.left_system = "a".into();
            t.right_system = "b".into();
        }
        st
    }

    #[test]
    fn win_matrix_skips_ties() {
        let st = fixed_study(25, &["r"]);
        let m = Metric::OverallPreference;
        let mut js = Vec::new();
        for t in 0..25 {
            let v = match t {
                0..=10 => Verdict::Left,
                11..=19 => Verdict::Right,
                _ => Verdict::Indistinguishable,
            };
            js.push(judge(t, "r", m, v));
        }
        let w = win_matrix(&st, &js);
        assert_eq!(w.cells[&m][0][1], Some(55.0));
        assert_eq!(w.cells[&m][1][0], Some(45.0));
        assert_eq!(w.cells[&Metric::Fluency][0][1], None);
        assert!(w.undecided.iter().any(|u| u.0 == Metric::Fluency));
    }

    #[test]
    fn kappa_hand_cases() {
        assert_eq!(fleiss_kappa_counts(&[vec![2, 0, 0], vec![0, 2, 0]]).unwrap(), (1.0, false));
        assert_eq!(fleiss_kappa_counts(&[vec![1, 1, 0], vec![1, 1, 0]]).unwrap(), (-1.0, false));
        assert_eq!(fleiss_kappa_counts(&[vec![2, 0, 0], vec![2, 0, 0]]).unwrap(), (1.0, true));
        assert!(fleiss_kappa_counts(&[vec![2, 0, 0]]).is_err());
        assert!(fleiss_kappa_counts(&[vec![2, 0, 0], vec![1, 0, 0]]).is_err());
    }

    #[test]
    fn kappa_from_judgments_excludes_incomplete() {
        let st = fixed_study(3, &["r1", "r2"]);
        let m = Metric::Fluency;
        let js = vec![
            judge(0, "r1", m, Verdict::Left),
            judge(0, "r2", m, Verdict::Left),
            judge(1, "r1", m, Verdict::Right),
            judge(1, "r2", m, Verdict::Right),
            judge(2, "r1", m, Verdict::Left),
        ];
        let k = fleiss_kappa(&st, &js, m, ("a", "b"), false).unwrap();
        assert_eq!((k.kappa, k.items, k.excluded), (1.0, 2, 1));
        assert_eq!(k.band, "almost perfect agreement");
    }

    #[test]
    fn bands() {
        assert_eq!(kappa_band(-0.1), "poor agreement");
        assert_eq!(kappa_band(0.2), "slight agreement");
        assert_eq!(kappa_band(0.41), "moderate agreement");
        assert_eq!(kappa_band(0.6), "moderate agreement");
        assert_eq!(kappa_band(0.65), "substantial agreement");
        assert_eq!(kappa_band(0.72), "substantial agreement");
        assert_eq!(kappa_band(0.81), "almost perfect agreement");
    }
}
