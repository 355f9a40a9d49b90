//! Acceptance checks, one PASS/FAIL line per criterion. Runs as a plain
//! binary (no libtest harness) so the lines come out in order and
//! unbuffered. Exits non-zero when any criterion fails.
//!
//! PLMW_ACCEPT_STEPS overrides the optimizer steps of the directional runs.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use plmw::decoder::{nucleus, top_p_sample};
use plmw::experiment::{eval_docs, prepare, rank_curve, run_paratype, ExperimentConfig};
use plmw::humaneval::{
    create_study, fleiss_kappa, fleiss_kappa_counts, kappa_band, win_matrix, Judgment, Metric, Sample, Study, Verdict,
    METRICS,
};
use plmw::lm::{grad_check_with, LrDecay, ModelConfig};
use plmw::metrics::{bleu, distinct_n, perplexity, truncated_bleu, DocLogprobs, Selector, SpecialIds, Unit};
use plmw::rng::Rng;
use plmw::{Codec, CodecMode, Document, Lang, ParaType, Special};

const SEEDS: [u64; 3] = [0, 1, 2];
const DEFAULT_STEPS: usize = 300;
const MIN_TRAIN_DOCS: usize = 2000;
const N_GENERATIONS: usize = 200;
const EOS_RATE_MARGIN: f64 = 5.0;
const TRAIN_BUDGET_SECS: f64 = 20.0 * 60.0;
const RANK_BUDGET_SECS: f64 = 120.0;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 10.0;
const EXACT: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXACT
}

// --- directional effect and rank curve ---------------------------------------

struct SeedResult {
    seed: u64,
    eos_ppl: (f64, f64),
    eos_rate: (f64, f64),
    n_gen: usize,
    train_secs: (f64, f64),
}

fn directional(steps: usize) -> (Outcome, Outcome) {
    let mut rows = Vec::new();
    let mut train_docs = usize::MAX;
    let mut rank: Option<Outcome> = None;
    for seed in SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.paratypes = vec![ParaType::None, ParaType::EopDiy];
        cfg.train.total_steps = steps;
        cfg.train.peak_lr = 1e-3;
        cfg.train.lr_decay = LrDecay::Cosine;
        cfg.eval.max_docs = N_GENERATIONS;
        cfg.eval.rank_curve = false;
        let (base, splits) = match prepare(&cfg) {
            Ok(x) => x,
            Err(e) => return (outcome(false, format!("seed {seed}: {e}")), outcome(false, "no model")),
        };
        train_docs = train_docs.min(splits.train.len());
        let mut runs = Vec::new();
        for &pt in &cfg.paratypes {
            match run_paratype(&cfg, &base, &splits, pt, None) {
                Ok(r) => runs.push(r),
                Err(e) => return (outcome(false, format!("seed {seed} {pt}: {e}")), outcome(false, "no model")),
            }
        }
        let (none, eop) = (&runs[0], &runs[1]);
        println!(
            "      seed {seed}: eos_ppl none {:.3} eop-diy {:.3}; eos% none {:.1} eop-diy {:.1}; train {:.0}s / {:.0}s",
            none.report.eos_ppl.unwrap_or(f64::NAN),
            eop.report.eos_ppl.unwrap_or(f64::NAN),
            none.report.eos_rate.unwrap_or(f64::NAN),
            eop.report.eos_rate.unwrap_or(f64::NAN),
            none.train_secs,
            eop.train_secs,
        );
        rows.push(SeedResult {
            seed,
            eos_ppl: (none.report.eos_ppl.unwrap_or(f64::NAN), eop.report.eos_ppl.unwrap_or(f64::NAN)),
            eos_rate: (none.report.eos_rate.unwrap_or(f64::NAN), eop.report.eos_rate.unwrap_or(f64::NAN)),
            n_gen: none.generations.len().min(eop.generations.len()),
            train_secs: (none.train_secs, eop.train_secs),
        });

        if rank.is_none() {
            let codec = base.for_paratype(ParaType::EopDiy);
            let docs = eval_docs(&cfg, &splits);
            let t0 = Instant::now();
            let curve = eop.checkpoint.model().and_then(|m| rank_curve(&m, &codec, docs, ParaType::EopDiy, true));
            let secs = t0.elapsed().as_secs_f64();
            rank = Some(match curve {
                Ok(c) => match (c.mean(100), c.mean_over(0, 90)) {
                    (Some(end), Some(body)) => outcome(
                        end < body && secs < RANK_BUDGET_SECS,
                        format!(
                            "seed {seed} eop-diy: bucket 100 mean rank {end:.2} vs buckets 0-90 {body:.2}; {secs:.1}s (< {RANK_BUDGET_SECS}s)"
                        ),
                    ),
                    _ => outcome(false, "empty buckets"),
                },
                Err(e) => outcome(false, e.to_string()),
            });
        }
    }

    let ppl_ok = rows.iter().all(|r| r.eos_ppl.1 < r.eos_ppl.0);
    let rate_ok = rows.iter().all(|r| r.eos_rate.1 >= r.eos_rate.0 + EOS_RATE_MARGIN);
    let gen_ok = rows.iter().all(|r| r.n_gen == N_GENERATIONS);
    let time_ok = rows.iter().all(|r| r.train_secs.0.max(r.train_secs.1) <= TRAIN_BUDGET_SECS);
    let docs_ok = train_docs >= MIN_TRAIN_DOCS;
    let per_seed: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "seed {}: ppl {} rate {}",
                r.seed,
                if r.eos_ppl.1 < r.eos_ppl.0 { "ok" } else { "no" },
                if r.eos_rate.1 >= r.eos_rate.0 + EOS_RATE_MARGIN { "ok" } else { "no" }
            )
        })
        .collect();
    let detail = format!(
        "{} seeds, {steps} steps, {train_docs} train docs, {N_GENERATIONS} generations; EOS-PPL lower for eop-diy: {}; EOS% +{EOS_RATE_MARGIN}: {}; [{}]",
        rows.len(),
        ppl_ok,
        rate_ok,
        per_seed.join("; ")
    );
    (
        outcome(ppl_ok && rate_ok && gen_ok && time_ok && docs_ok, detail),
        rank.unwrap_or_else(|| outcome(false, "no model")),
    )
}

// --- gradient check ----------------------------------------------------------

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0f64;
    for seed in 0..5u64 {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 64,
            context_len: 12,
            vocab_size: 11,
            dropout: 0.0,
            seed,
        };
        let mut rng = Rng::new(1000 + seed);
        let ids: Vec<u32> = (0..10).map(|_| rng.below(cfg.vocab_size) as u32).collect();
        match grad_check_with(&cfg, &ids, 1e-3) {
            Ok(r) => worst = worst.max(r.max_rel_error),
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_TOL && secs < GRAD_BUDGET_SECS,
        format!("max relative error {worst:.2e} (< {GRAD_TOL:e}) over 5 seeds, 2 layers, d_model 16; {secs:.2}s"),
    )
}

// --- metric oracles ----------------------------------------------------------

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn doc_lp(targets: Vec<u32>, logprobs: Vec<f64>) -> DocLogprobs {
    DocLogprobs {
        doc_id: "d".into(),
        targets,
        logprobs,
        marker_positions: Vec::new(),
        ref_words: None,
    }
}

fn metric_oracles() -> Outcome {
    let specials = SpecialIds {
        eos: 0,
        eop: None,
        sep: None,
    };
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let uniform = -(16f64).ln();
    let p = perplexity(&[doc_lp(vec![1, 2, 3, 0], vec![uniform; 4])], Selector::All, Unit::Token, &specials).unwrap();
    check("uniform ppl", close(p, 16.0));
    let a = doc_lp(vec![1, 1], vec![0.0, 0.0]);
    let b = doc_lp(vec![1, 1], vec![-(4f64).ln(); 2]);
    let p = perplexity(&[a, b], Selector::All, Unit::Token, &specials).unwrap();
    check("macro ppl", close(p, 2.5));

    check("bleu identity", close(bleu(&[w("a b c")], &[w("a b c")], 2).unwrap(), 100.0));
    check("bleu hand count", close(bleu(&[w("a b c")], &[w("a b d")], 1).unwrap(), 200.0 / 3.0));
    check("bleu disjoint", bleu(&[w("x y z")], &[w("a b c")], 1).unwrap() < 1e-6);
    check("t-bleu 100", close(truncated_bleu(&[w("a b c d e")], &[w("a b c")], 1).unwrap(), 100.0));
    check("t-bleu 50", close(truncated_bleu(&[w("x a b")], &[w("a b")], 1).unwrap(), 50.0));
    check("dist1", close(distinct_n(&[w("a a b")], 1).unwrap(), 200.0 / 3.0));
    check("dist2", close(distinct_n(&[w("a a a")], 2).unwrap(), 50.0));
    check("dist all distinct", close(distinct_n(&[w("a b c d")], 1).unwrap(), 100.0));

    // T-BLEU = BLEU when no candidate outruns its reference
    let mut rng = Rng::new(77);
    let vocab = ["a", "b", "c", "d", "e"];
    let mut agree = 0;
    for _ in 0..1000 {
        let pairs = 1 + rng.below(5);
        let n = 1 + rng.below(2);
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..pairs {
            let r: Vec<&str> = (0..rng.below(12)).map(|_| vocab[rng.below(5)]).collect();
            let c: Vec<&str> = (0..rng.below(r.len() + 1)).map(|_| vocab[rng.below(5)]).collect();
            cands.push(c);
            refs.push(r);
        }
        if bleu(&cands, &refs, n).unwrap() == truncated_bleu(&cands, &refs, n).unwrap() {
            agree += 1;
        }
    }
    check("t-bleu = bleu", agree == 1000);

    outcome(
        failures.is_empty(),
        format!(
            "uniform PPL 16, macro PPL 2.5, BLEU/T-BLEU/DIST hand counts, T-BLEU = BLEU on {agree}/1000 random cases{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failures.join(", "))
            }
        ),
    )
}

// --- sampling ----------------------------------------------------------------

fn normalized(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|x| x / total).collect()
}

/// Shortest prefix of the (probability desc, id asc) order reaching p.
fn nucleus_oracle(probs: &[f64], p: f64) -> BTreeSet<u32> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = BTreeSet::new();
    let mut mass = 0.0;
    for i in ids {
        out.insert(i as u32);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out
}

fn sampling() -> Outcome {
    let mut gen = Rng::new(4321);
    let mut draws = 0usize;
    let mut outside = 0usize;
    let mut set_mismatch = 0usize;
    for _ in 0..200 {
        let v = 2 + gen.below(40);
        // integer weights make probability ties common
        let weights: Vec<f64> = (0..v).map(|_| (1 + gen.below(6)) as f64).collect();
        let probs = normalized(&weights);
        let p = 0.05 + 0.95 * gen.uniform();
        let allowed = nucleus_oracle(&probs, p);
        let got: BTreeSet<u32> = nucleus(&probs, p).unwrap().into_iter().map(|x| x.0).collect();
        if got != allowed {
            set_mismatch += 1;
        }
        let mut rng = Rng::new(gen.next_u64());
        for _ in 0..500 {
            if !allowed.contains(&top_p_sample(&probs, p, &mut rng).unwrap()) {
                outside += 1;
            }
            draws += 1;
        }
    }

    let probs = [0.4, 0.25, 0.15, 0.1, 0.06, 0.04];
    let n = 100_000usize;
    let mut counts = [0usize; 6];
    let mut rng = Rng::new(99);
    for _ in 0..n {
        counts[top_p_sample(&probs, 1.0, &mut rng).unwrap() as usize] += 1;
    }
    let worst_z = probs
        .iter()
        .zip(counts)
        .map(|(&q, c)| (c as f64 - n as f64 * q).abs() / (n as f64 * q * (1.0 - q)).sqrt())
        .fold(0.0, f64::max);
    outcome(
        draws == 100_000 && outside == 0 && set_mismatch == 0 && worst_z <= 3.0,
        format!(
            "{draws} draws, {outside} outside the nucleus, {set_mismatch} nucleus mismatches; p=1 worst deviation {worst_z:.2} sigma (<= 3)"
        ),
    )
}

// --- human evaluation --------------------------------------------------------

fn study(n_systems: usize, n_samples: usize, n_raters: usize, seed: u64) -> Study {
    let systems: Vec<String> = (0..n_systems).map(|i| format!("s{i}")).collect();
    let samples: Vec<Sample> = (0..n_samples)
        .map(|k| Sample {
            id: format!("x{k}"),
            prompt: String::new(),
            generations: systems.iter().map(|s| (s.clone(), format!("{s}-{k}"))).collect::<BTreeMap<_, _>>(),
        })
        .collect();
    let raters: Vec<String> = (0..n_raters).map(|i| format!("r{i}")).collect();
    create_study("acc", &systems, &samples, n_samples, &raters, seed).unwrap()
}

fn random_verdict(rng: &mut Rng) -> Verdict {
    match rng.below(3) {
        0 => Verdict::Left,
        1 => Verdict::Right,
        _ => Verdict::Indistinguishable,
    }
}

/// A random judgment multiset: each (task, rater, metric) judged with
/// probability 0.8.
fn random_judgments(st: &Study, rng: &mut Rng) -> Vec<Judgment> {
    let mut out = Vec::new();
    for t in &st.tasks {
        for r in &st.raters {
            for &m in &st.metrics {
                if rng.uniform() < 0.8 {
                    out.push(Judgment {
                        task_id: t.task_id,
                        rater_id: r.clone(),
                        metric: m,
                        verdict: random_verdict(rng),
                        timestamp: 0,
                    });
                }
            }
        }
    }
    out
}

fn flip(v: Verdict) -> Verdict {
    match v {
        Verdict::Left => Verdict::Right,
        Verdict::Right => Verdict::Left,
        Verdict::Indistinguishable => Verdict::Indistinguishable,
    }
}

fn kappa() -> Outcome {
    let one = fleiss_kappa_counts(&[vec![2, 0, 0], vec![0, 2, 0]]).unwrap().0;
    let minus_one = fleiss_kappa_counts(&[vec![1, 1, 0], vec![1, 1, 0]]).unwrap().0;
    let hand_ok = one == 1.0 && minus_one == -1.0;

    let mut rng = Rng::new(5150);
    let mut compared = 0;
    let mut mismatched = 0;
    for _ in 0..300 {
        let st = study(2, 6, 2 + rng.below(3), rng.next_u64());
        let js = random_judgments(&st, &mut rng);
        let mut swapped = st.clone();
        for t in &mut swapped.tasks {
            std::mem::swap(&mut t.left_system, &mut t.right_system);
        }
        let flipped: Vec<Judgment> = js.iter().map(|j| Judgment { verdict: flip(j.verdict), ..j.clone() }).collect();
        for m in METRICS {
            for drop_ties in [false, true] {
                let a = fleiss_kappa(&st, &js, m, ("s0", "s1"), drop_ties);
                let b = fleiss_kappa(&swapped, &flipped, m, ("s0", "s1"), drop_ties);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        compared += 1;
                        if (a.kappa - b.kappa).abs() > 1e-12 {
                            mismatched += 1;
                        }
                    }
                    (Err(_), Err(_)) => {}
                    _ => mismatched += 1,
                }
            }
        }
    }

    // band boundaries: each band's upper edge is inclusive
    let bands = [
        (-0.01, "poor agreement"),
        (0.0, "slight agreement"),
        (0.20, "slight agreement"),
        (0.21, "fair agreement"),
        (0.40, "fair agreement"),
        (0.41, "moderate agreement"),
        (0.60, "moderate agreement"),
        (0.61, "substantial agreement"),
        (0.65, "substantial agreement"),
        (0.80, "substantial agreement"),
        (0.81, "almost perfect agreement"),
        (1.0, "almost perfect agreement"),
    ];
    let band_misses: Vec<f64> = bands.iter().filter(|(k, b)| kappa_band(*k) != *b).map(|x| x.0).collect();
    outcome(
        hand_ok && compared > 0 && mismatched == 0 && band_misses.is_empty(),
        format!(
            "hand cases {one} and {minus_one}; relabeling changed {mismatched} of {compared} kappas; band misses {band_misses:?}"
        ),
    )
}

fn win_matrices() -> Outcome {
    let mut rng = Rng::new(8080);
    let mut cells = 0;
    let mut bad = 0;
    for _ in 0..300 {
        let k = 2 + rng.below(3);
        let st = study(k, 3, 2, rng.next_u64());
        let wm = win_matrix(&st, &random_judgments(&st, &mut rng));
        for grid in wm.cells.values() {
            for a in 0..k {
                if grid[a][a].is_some() {
                    bad += 1;
                }
                for b in a + 1..k {
                    match (grid[a][b], grid[b][a]) {
                        (Some(x), Some(y)) => {
                            cells += 1;
                            if (x + y - 100.0).abs() > EXACT {
                                bad += 1;
                            }
                        }
                        (None, None) => {}
                        _ => bad += 1,
                    }
                }
            }
        }
    }

    // 11 wins, 9 losses, 5 ties for the left system
    let mut st = study(2, 25, 1, 0);
    for t in &mut st.tasks {
        t.left_system = "s0".into();
        t.right_system = "s1".into();
    }
    let m = Metric::OverallPreference;
    let js: Vec<Judgment> = st
        .tasks
        .iter()
        .map(|t| Judgment {
            task_id: t.task_id,
            rater_id: "r0".into(),
            metric: m,
            verdict: match t.task_id {
                0..=10 => Verdict::Left,
                11..=19 => Verdict::Right,
                _ => Verdict::Indistinguishable,
            },
            timestamp: 0,
        })
        .collect();
    let wm = win_matrix(&st, &js);
    let (x, y) = (wm.cells[&m][0][1], wm.cells[&m][1][0]);
    outcome(
        bad == 0 && cells > 0 && x == Some(55.0) && y == Some(45.0),
        format!("{cells} decided pairs complement to 100 ({bad} violations); 11/9/5 gives {x:?}/{y:?}"),
    )
}

// --- serialization -----------------------------------------------------------

const PARATYPES: [ParaType; 5] = [
    ParaType::None,
    ParaType::SepNl,
    ParaType::SepDiy,
    ParaType::EopNl,
    ParaType::EopDiy,
];

fn random_doc(rng: &mut Rng) -> Document {
    let first = "abcdefgh";
    let rest = "abcdefgh ,.";
    let paragraphs = (0..1 + rng.below(7))
        .map(|_| {
            let mut p = String::new();
            p.push(first.as_bytes()[rng.below(first.len())] as char);
            for _ in 0..rng.below(25) {
                p.push(rest.as_bytes()[rng.below(rest.len())] as char);
            }
            p
        })
        .collect();
    Document {
        id: "d".into(),
        prompt: "p".into(),
        paragraphs,
        lang: Lang::English,
    }
}

fn serialization() -> Outcome {
    let seed_doc = Document {
        id: "seed".into(),
        prompt: String::new(),
        paragraphs: vec!["abcdefgh .,".into(), "abc abc. deaf, bead cafe. face gab".into()],
        lang: Lang::English,
    };
    let base = Codec::train(&[seed_doc], CodecMode::Bpe, 40, &[]).unwrap();
    let mut rng = Rng::new(2024);
    let mut count_errors = 0;
    let mut strip_errors = 0;
    for _ in 0..1000 {
        let doc = random_doc(&mut rng);
        let n = doc.paragraphs.len();
        let content: Vec<u32> = doc.paragraphs.iter().flat_map(|p| base.encode(p)).collect();
        for pt in PARATYPES {
            let c = base.for_paratype(pt);
            let seq = c.serialize_document(&doc, pt, true).unwrap();
            let (expected, marker) = match pt {
                ParaType::None => (0, None),
                ParaType::SepNl => (n - 1, Some(c.vocab().nl())),
                ParaType::SepDiy => (n - 1, c.vocab().special(Special::Sep)),
                ParaType::EopNl => (n, Some(c.vocab().nl())),
                ParaType::EopDiy => (n, c.vocab().special(Special::Eop)),
            };
            let found = marker.map_or(0, |m| seq.ids.iter().filter(|&&t| t == m).count());
            let eos = seq.ids.iter().filter(|&&t| t == c.vocab().eos()).count();
            if found != expected || eos != 1 || seq.ids.last() != Some(&c.vocab().eos()) {
                count_errors += 1;
            }
            if c.strip_special(&seq).ids != content {
                strip_errors += 1;
            }
        }
    }
    outcome(
        count_errors == 0 && strip_errors == 0,
        format!("1000 documents x 5 paratypes: {count_errors} marker-count errors, {strip_errors} strip mismatches"),
    )
}

fn main() -> ExitCode {
    let steps = std::env::var("PLMW_ACCEPT_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_STEPS);

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("gradient-check", gradients());
    report("metric-oracles", metric_oracles());
    report("sampling", sampling());
    report("kappa", kappa());
    report("win-matrix", win_matrices());
    report("serialization", serialization());
    let (effect, rank) = directional(steps);
    report("directional-eop-effect", effect);
    report("rank-curve-direction", rank);

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
