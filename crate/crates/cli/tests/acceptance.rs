//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criterion 1 needs the public USPTO-70k splits, which are not bundled: point
//! `USPTO70K_DIR` at a directory holding `train.jsonl` and `test.jsonl` (or
//! `.csv`). Without it the criterion is reported as FAIL but does not fail the
//! run unless `ACCEPTANCE_STRICT=1` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cpc_harness::costs::{format_quantity, load_costs, per_patent, Setting, Stage};
use cpc_harness::decoding::{calibrate_threshold, decode, DecoderConfig, ProbabilityMatrix};
use cpc_harness::metrics::{
    evaluate, level_tables, MetricOptions, MetricReport, PredictionRecord, Prf,
};
use cpc_harness::retrieval::{AllowedCode, AllowedLabelSet, AllowedSets};
use cpc_harness::stats::{
    bootstrap_ci, wilcoxon, Alternative, BootstrapConfig, BootstrapMetric, TestMethod, ZeroMode,
};
use cpc_harness::taxonomy::{CpcCode, Level};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::Value;
use sha2::{Digest, Sha256};

const TOL: f64 = 1e-12;
const LEVELS: [Level; 3] = [Level::Section, Level::Class, Level::Subclass];

type Check = Result<String, String>;
type Docs = Vec<(BTreeSet<String>, Vec<String>)>;
type Criterion = (u8, &'static str, fn() -> Outcome);

enum Outcome {
    Pass(String),
    Fail(String),
    /// Failed because external data is absent.
    Unavailable(String),
}

// ---------------------------------------------------------------- helpers

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cpc-harness")
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn fx(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        let shown: Vec<String> = args
            .iter()
            .map(|a| a.as_ref().to_string_lossy().into_owned())
            .collect();
        Err(format!(
            "`cpc-harness {}` exited with {:?}: {}",
            shown.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_json(path: &Path) -> Result<Value, String> {
    serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn code(s: &str) -> CpcCode {
    CpcCode::parse_canonical(s).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn near(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{what}: got {got}, want {want}")
    })
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config::with_cases(cases),
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

// ------------------------------------------------- brute-force metric recount

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

struct Recount {
    micro: (f64, f64, f64),
    macro_: (f64, f64, f64),
    levels: [(u64, u64, u64); 3],
    pooled: (f64, f64, f64),
}

/// Counts every (document, label) decision directly, one level at a time.
fn recount(docs: &[(BTreeSet<String>, Vec<String>)]) -> Recount {
    let mut levels = [(0, 0, 0); 3];
    let mut macro_ = (0.0, 0.0, 0.0);
    for (li, len) in [1usize, 3, 4].into_iter().enumerate() {
        let cut = |s: &String| s[..len].to_string();
        let lifted: Vec<(BTreeSet<String>, BTreeSet<String>)> = docs
            .iter()
            .map(|(g, p)| (g.iter().map(cut).collect(), p.iter().map(cut).collect()))
            .collect();
        let labels: BTreeSet<String> = lifted
            .iter()
            .flat_map(|(g, p)| g.iter().chain(p))
            .cloned()
            .collect();
        let mut sums = (0.0, 0.0, 0.0);
        let mut supported = 0usize;
        for label in &labels {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (g, p) in &lifted {
                match (g.contains(label), p.contains(label)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => {}
                }
            }
            levels[li].0 += tp;
            levels[li].1 += fp;
            levels[li].2 += fn_;
            if tp + fn_ > 0 {
                let (p, r, f) = prf(tp, fp, fn_);
                sums = (sums.0 + p, sums.1 + r, sums.2 + f);
                supported += 1;
            }
        }
        if len == 4 && supported > 0 {
            let n = supported as f64;
            macro_ = (sums.0 / n, sums.1 / n, sums.2 / n);
        }
    }
    let (tp, fp, fn_) = levels[2];
    let pooled = levels
        .iter()
        .fold((0, 0, 0), |a, l| (a.0 + l.0, a.1 + l.1, a.2 + l.2));
    Recount {
        micro: prf(tp, fp, fn_),
        macro_,
        levels,
        pooled: prf(pooled.0, pooled.1, pooled.2),
    }
}

fn same_prf(got: &Prf, want: (f64, f64, f64), what: &str) -> Result<(), String> {
    near(got.precision, want.0, TOL, &format!("{what} precision"))?;
    near(got.recall, want.1, TOL, &format!("{what} recall"))?;
    near(got.f1, want.2, TOL, &format!("{what} f1"))
}

fn matches_recount(
    report: &MetricReport,
    docs: &[(BTreeSet<String>, Vec<String>)],
) -> Result<(), String> {
    let want = recount(docs);
    same_prf(&report.micro, want.micro, "micro")?;
    same_prf(&report.macro_, want.macro_, "macro")?;
    for (i, level) in LEVELS.into_iter().enumerate() {
        let (tp, fp, fn_) = want.levels[i];
        same_prf(
            &report.hierarchical.at(level),
            prf(tp, fp, fn_),
            level.name(),
        )?;
    }
    same_prf(&report.hierarchical.pooled, want.pooled, "pooled")
}

const POOL: [&str; 8] = [
    "G06F", "G06K", "G06N", "G01N", "H04L", "H04W", "H01L", "A61K",
];

/// Up to 6 documents over up to 8 labels: gold sets are non-empty, predictions
/// are ordered and possibly empty.
fn instances() -> impl Strategy<Value = Vec<(BTreeSet<String>, Vec<String>)>> {
    (1usize..=8).prop_flat_map(|n| {
        let labels: Vec<String> = POOL[..n].iter().map(|s| s.to_string()).collect();
        let gold =
            prop::sample::subsequence(labels.clone(), 1..=n).prop_map(|v| v.into_iter().collect());
        let pred = prop::sample::subsequence(labels, 0..=n.min(7)).prop_shuffle();
        prop::collection::vec((gold, pred), 1..=6)
    })
}

fn records(docs: &[(BTreeSet<String>, Vec<String>)]) -> Vec<PredictionRecord> {
    docs.iter()
        .enumerate()
        .map(|(i, (g, p))| PredictionRecord {
            id: format!("d{i}"),
            gold: g.iter().map(|s| code(s)).collect(),
            predicted: p.iter().map(|s| code(s)).collect(),
        })
        .collect()
}

// ------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let Some(dir) = std::env::var_os("USPTO70K_DIR").map(PathBuf::from) else {
        return Outcome::Unavailable(
            "USPTO70K_DIR is not set; the public USPTO-70k splits are not bundled".into(),
        );
    };
    match uspto_stats(&dir) {
        Ok(msg) => Outcome::Pass(msg),
        Err(msg) => Outcome::Fail(msg),
    }
}

fn split_file(dir: &Path, split: &str) -> Result<PathBuf, String> {
    ["jsonl", "csv"]
        .iter()
        .map(|ext| dir.join(format!("{split}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| format!("no {split}.jsonl or {split}.csv in {}", dir.display()))
}

fn uspto_stats(dir: &Path) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut summaries = Vec::new();
    for split in ["train", "test"] {
        let out = tmp.path().join(split);
        let corpus = split_file(dir, split)?;
        cli(&[
            "stats",
            "--corpus",
            &corpus.to_string_lossy(),
            "--split",
            split,
            "--format",
            "json",
            "--out",
            &out.to_string_lossy(),
        ])?;
        summaries.push(read_json(&out.join("stats.json"))?);
    }
    let elapsed = start.elapsed();
    let (train, test) = (&summaries[0], &summaries[1]);
    let counts: BTreeMap<String, u64> = train["counts"]
        .as_array()
        .ok_or("stats.json has no counts")?
        .iter()
        .map(|c| {
            (
                c["code"].as_str().unwrap_or_default().to_string(),
                c["count"].as_u64().unwrap_or_default(),
            )
        })
        .collect();
    for (c, want) in [
        ("G06F", 6272),
        ("H04L", 4341),
        ("Y10T", 4290),
        ("H01L", 4168),
        ("H04N", 2592),
        ("C12L", 4),
    ] {
        let got = counts.get(c).copied().unwrap_or(0);
        ensure(got == want, || format!("count({c}) = {got}, want {want}"))?;
    }
    let s = train;
    let num = |v: &Value, k: &str| v[k].as_f64().ok_or_else(|| format!("summary lacks {k}"));
    near(num(s, "mean_labels")?, 1.98, 0.005, "train mean labels")?;
    near(num(s, "median_labels")?, 2.0, 0.0, "train median labels")?;
    near(
        100.0 * num(s, "share_within_cap")?,
        99.48,
        0.01,
        "train share in [1,7] (%)",
    )?;
    near(num(s, "max_labels")?, 18.0, 0.0, "train max labels")?;
    let t = test;
    near(num(t, "mean_labels")?, 2.32, 0.005, "test mean labels")?;
    near(
        100.0 * num(t, "share_within_cap")?,
        99.21,
        0.01,
        "test share in [1,7] (%)",
    )?;
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "train and test statistics reproduced in {elapsed:.2?}"
    ))
}

fn criterion_2() -> Check {
    let mut r = runner(500);
    r.run(&instances(), |docs| {
        let report = evaluate(&records(&docs), &MetricOptions::default())
            .unwrap()
            .report;
        matches_recount(&report, &docs).map_err(TestCaseError::fail)
    })
    .map_err(|e| e.to_string())?;
    Ok("500 random instances equal the brute-force recount".into())
}

fn criterion_3() -> Check {
    let mut r = runner(500);
    r.run(&instances(), |docs| {
        for rec in records(&docs) {
            let tables = level_tables(std::slice::from_ref(&rec), None).unwrap();
            for row in tables[2].rows.iter().filter(|row| row.tp > 0) {
                let sub = code(row.label.as_str());
                for (i, level) in [Level::Section, Level::Class].into_iter().enumerate() {
                    let up = sub.at_level(level);
                    let tp = tables[i].get(up.as_str()).map_or(0, |c| c.tp);
                    prop_assert!(tp > 0, "{sub} TP without {up} TP in {}", rec.id);
                }
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let example = vec![PredictionRecord {
        id: "x".into(),
        gold: BTreeSet::from([code("G06F")]),
        predicted: vec![code("G06K")],
    }];
    let h = evaluate(&example, &MetricOptions::default())
        .map_err(|e| e.to_string())?
        .report
        .hierarchical;
    near(h.subclass.f1, 0.0, 0.0, "G06F/G06K subclass F1")?;
    near(h.class.f1, 1.0, 0.0, "G06F/G06K class F1")?;
    near(h.section.f1, 1.0, 0.0, "G06F/G06K section F1")?;
    Ok("subclass TPs propagate on 500 instances; G06F vs G06K gives F1 0/1/1".into())
}

fn criterion_4() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases = read_json(&fixtures().join("../parser/cases.json"))?;
    let cases = cases.as_array().ok_or("cases.json is not a list")?;
    ensure(cases.len() >= 12, || {
        format!("only {} fixtures", cases.len())
    })?;
    let mut checked = 0;
    let groups: [(bool, bool); 3] = [(false, false), (true, false), (true, true)];
    for (with_allowed, nonempty) in groups {
        let group: Vec<&Value> = cases
            .iter()
            .filter(|c| {
                c["allowed"].is_array() == with_allowed
                    && c["enforce_nonempty"].as_bool() == Some(nonempty)
            })
            .collect();
        if group.is_empty() {
            continue;
        }
        let gens: String = group
            .iter()
            .map(|c| {
                serde_json::json!({"id": c["name"], "raw_output": c["raw"]}).to_string() + "\n"
            })
            .collect();
        let tag = format!("{with_allowed}_{nonempty}");
        let raw = tmp.path().join(format!("gens_{tag}.jsonl"));
        let out = tmp.path().join(format!("parsed_{tag}.jsonl"));
        std::fs::write(&raw, gens).map_err(|e| e.to_string())?;
        let mut args: Vec<String> = vec![
            "parse".into(),
            "--raw".into(),
            raw.to_string_lossy().into(),
            "--out".into(),
            out.to_string_lossy().into(),
        ];
        if with_allowed {
            let sets: String = group
                .iter()
                .map(|c| {
                    let codes = c["allowed"].as_array().unwrap();
                    let scores: Vec<f64> =
                        (0..codes.len()).map(|i| 1.0 - i as f64 * 0.01).collect();
                    serde_json::json!({"id": c["name"], "codes": codes, "scores": scores})
                        .to_string()
                        + "\n"
                })
                .collect();
            let allowed = tmp.path().join(format!("allowed_{tag}.jsonl"));
            std::fs::write(&allowed, sets).map_err(|e| e.to_string())?;
            args.extend(["--allowed".into(), allowed.to_string_lossy().into()]);
        }
        if nonempty {
            args.push("--nonempty".into());
        }
        cli(&args)?;
        let parsed: Vec<Value> = read(&out)?
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        ensure(parsed.len() == group.len(), || "row count differs".into())?;
        for (case, got) in group.iter().zip(&parsed) {
            let want = &case["expected"];
            let name = case["name"].as_str().unwrap();
            ensure(got["id"] == case["name"], || {
                format!("{name}: rows out of order")
            })?;
            ensure(got["labels"] == want["labels"], || {
                format!("{name}: labels {} vs {}", got["labels"], want["labels"])
            })?;
            ensure(got["path"] == want["path"], || {
                format!("{name}: path {} vs {}", got["path"], want["path"])
            })?;
            ensure(got["dropped"] == want["dropped"], || {
                format!("{name}: dropped {} vs {}", got["dropped"], want["dropped"])
            })?;
            if with_allowed && nonempty {
                let labels = got["labels"].as_array().unwrap();
                let allowed = case["allowed"].as_array().unwrap();
                ensure(
                    (1..=7).contains(&labels.len()) && labels.iter().all(|l| allowed.contains(l)),
                    || format!("{name}: {labels:?} escapes the allowed set or the 1..=7 bound"),
                )?;
            }
            checked += 1;
        }
    }
    ensure(checked == cases.len(), || {
        format!("{checked} of {} fixtures checked", cases.len())
    })?;
    Ok(format!(
        "{checked} fixtures give the exact outcome, path and drop list"
    ))
}

const MATRIX_CODES: [&str; 12] = [
    "A01B", "A61K", "B60L", "C07K", "C12N", "E04B", "F16H", "G01N", "G06F", "G06N", "H04L", "H04W",
];

/// Rows of scores in steps of 1/20, so ties and exact zeros are common.
fn matrix_strategy(
    max_rows: usize,
    max_labels: usize,
) -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1usize..=max_labels, 1usize..=max_rows).prop_flat_map(|(n_labels, n_rows)| {
        let row = prop::collection::vec((0u32..=20).prop_map(|k| k as f64 / 20.0), n_labels);
        (Just(n_labels), prop::collection::vec(row, n_rows))
    })
}

fn build_matrix(n_labels: usize, rows: &[Vec<f64>]) -> ProbabilityMatrix {
    ProbabilityMatrix::new(
        (0..rows.len()).map(|i| format!("r{i}")).collect(),
        MATRIX_CODES[..n_labels].iter().map(|s| code(s)).collect(),
        rows.concat(),
    )
    .unwrap()
}

/// Select scores above `tau`, else the single best (ties to the smaller
/// code); order by score then code; keep 7.
fn oracle_decode(labels: &[CpcCode], row: &[f64], tau: f64) -> Vec<CpcCode> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| row[j] > tau).collect();
    let rank = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap()
            .then(labels[*a].cmp(&labels[*b]))
    };
    if idx.is_empty() {
        let mut all: Vec<usize> = (0..row.len()).collect();
        all.sort_by(rank);
        idx.push(all[0]);
    }
    idx.sort_by(rank);
    idx.truncate(7);
    idx.into_iter().map(|j| labels[j]).collect()
}

fn oracle_micro_f1(gold: &[BTreeSet<CpcCode>], preds: &[Vec<CpcCode>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (g, p) in gold.iter().zip(preds) {
        let hit = p.iter().filter(|c| g.contains(c)).count() as u64;
        tp += hit;
        fp += p.len() as u64 - hit;
        fn_ += g.len() as u64 - hit;
    }
    prf(tp, fp, fn_).2
}

fn criterion_5() -> Check {
    let fallbacks = std::cell::Cell::new(0usize);
    let mut r = runner(1000);
    let strategy = matrix_strategy(5, 12).prop_flat_map(|(n, rows)| {
        let n_rows = rows.len();
        let mask = prop::collection::vec(
            prop::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n).prop_shuffle(),
            n_rows,
        );
        (
            Just(n),
            Just(rows),
            mask,
            (0u32..=20).prop_map(|k| k as f64 / 20.0),
        )
    });
    r.run(&strategy, |(n, rows, mask, tau)| {
        let probs = build_matrix(n, &rows);
        let sets: AllowedSets = mask
            .iter()
            .enumerate()
            .map(|(i, cols)| {
                let entries = cols
                    .iter()
                    .enumerate()
                    .map(|(rank, &c)| AllowedCode {
                        code: code(MATRIX_CODES[c]),
                        score: -(rank as f64),
                    })
                    .collect();
                (
                    format!("r{i}"),
                    AllowedLabelSet::new(format!("r{i}"), entries).unwrap(),
                )
            })
            .collect();
        let config = DecoderConfig::new(tau, 7).unwrap();
        for row in decode(&probs, &config, Some(&sets)).unwrap() {
            let allowed = &sets[&row.id];
            prop_assert!(!row.labels.is_empty() && row.labels.len() <= 7);
            prop_assert!(
                row.labels.iter().all(|c| allowed.contains(c)),
                "{} escapes its mask",
                row.id
            );
            fallbacks.set(fallbacks.get() + row.fallback as usize);
        }
        for row in decode(&probs, &config, None).unwrap() {
            prop_assert!(!row.labels.is_empty() && row.labels.len() <= 7);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let fallbacks = fallbacks.get();
    ensure(fallbacks > 0, || "no argmax fallback was exercised".into())?;

    let grid: Vec<f64> = (0..200).map(|i| i as f64 * 0.005).chain([1.0]).collect();
    let mut r = runner(300);
    let toy = matrix_strategy(6, 6).prop_flat_map(|(n, rows)| {
        let gold = prop::collection::vec(
            prop::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n),
            rows.len(),
        );
        (Just(n), Just(rows), gold)
    });
    r.run(&toy, |(n, rows, gold)| {
        let probs = build_matrix(n, &rows);
        let labels = probs.labels().to_vec();
        let gold: Vec<BTreeSet<CpcCode>> = gold
            .iter()
            .map(|g| g.iter().map(|&j| labels[j]).collect())
            .collect();
        let f1_at = |tau: f64| {
            let preds: Vec<Vec<CpcCode>> = rows
                .iter()
                .map(|row| oracle_decode(&labels, row, tau))
                .collect();
            oracle_micro_f1(&gold, &preds)
        };
        let mut candidates: Vec<f64> = rows.concat();
        candidates.extend([0.0, 1.0]);
        let best = candidates
            .iter()
            .map(|&t| f1_at(t))
            .fold(f64::MIN, f64::max);
        let cal = calibrate_threshold(&probs, &gold, 0.005, 7, None).unwrap();
        prop_assert!(
            (cal.micro_f1 - best).abs() <= TOL,
            "calibrated {} vs sweep {best}",
            cal.micro_f1
        );
        let first = grid
            .iter()
            .copied()
            .find(|&t| (f1_at(t) - best).abs() <= TOL)
            .unwrap();
        prop_assert!(
            (cal.threshold - first).abs() <= TOL,
            "threshold {} vs smallest best {first}",
            cal.threshold
        );
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(format!("1000 masked matrices stay inside their sets ({fallbacks} fallback rows); 300 calibrations match the sweep"))
}

fn criterion_6() -> Check {
    let mut patterns = 0usize;
    for n in 1..=12usize {
        let total = 1u64 << n;
        let max_w = n * (n + 1) / 2;
        let mut dist = vec![0u64; max_w + 1];
        for s in 0..total {
            let w: usize = (0..n).filter(|i| s >> i & 1 == 1).map(|i| i + 1).sum();
            dist[w] += 1;
        }
        let upper = |w: usize| dist[w..].iter().sum::<u64>() as f64 / total as f64;
        let lower = |w: usize| dist[..=w].iter().sum::<u64>() as f64 / total as f64;
        for s in 0..total {
            let a: Vec<f64> = (0..n)
                .map(|i| {
                    if s >> i & 1 == 1 {
                        (i + 1) as f64
                    } else {
                        -((i + 1) as f64)
                    }
                })
                .collect();
            let b = vec![0.0; n];
            let w: usize = (0..n).filter(|i| s >> i & 1 == 1).map(|i| i + 1).sum();
            let want = [
                (Alternative::Greater, Alternative::Less, upper(w)),
                (Alternative::Less, Alternative::Greater, lower(w)),
                (
                    Alternative::TwoSided,
                    Alternative::TwoSided,
                    (2.0 * upper(w).min(lower(w))).min(1.0),
                ),
            ];
            for (alt, flipped, p) in want {
                let got = wilcoxon(&a, &b, alt, ZeroMode::Wilcox).map_err(|e| e.to_string())?;
                ensure(got.method == TestMethod::Exact, || {
                    format!("n={n}: not exact")
                })?;
                near(got.p_value, p, TOL, &format!("n={n} signs={s:b} {alt:?}"))?;
                let swapped =
                    wilcoxon(&b, &a, flipped, ZeroMode::Wilcox).map_err(|e| e.to_string())?;
                ensure(swapped.p_value == got.p_value, || {
                    format!(
                        "n={n} signs={s:b}: swapped {} vs {}",
                        swapped.p_value, got.p_value
                    )
                })?;
            }
            patterns += 1;
        }
    }
    let d = [1.0, 2.0, 3.0, 4.0, 5.0];
    let p = wilcoxon(&d, &[0.0; 5], Alternative::Greater, ZeroMode::Wilcox)
        .map_err(|e| e.to_string())?
        .p_value;
    near(p, 0.03125, TOL, "d = (1..5) greater")?;
    Ok(format!(
        "{patterns} sign patterns (n <= 12) match enumeration; (1..5) greater p = {p}"
    ))
}

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = tmp.path().join("run");
    cli(&[
        "decode",
        "--probs",
        &fx("probs_test.csv"),
        "--test",
        &fx("test.jsonl"),
        "--threshold",
        "0.5",
        "--out",
        &run.to_string_lossy(),
    ])?;
    let preds = run.join("predictions.jsonl").to_string_lossy().into_owned();
    let mut outputs = Vec::new();
    for (i, jobs) in [None, Some("1"), Some("1"), Some("2"), Some("8")]
        .into_iter()
        .enumerate()
    {
        let out = tmp.path().join(format!("ci_{i}.json"));
        let mut args = vec![
            "bootstrap",
            "--predictions",
            &preds,
            "-B",
            "2000",
            "--seed",
            "20250101",
        ];
        let out_s = out.to_string_lossy().into_owned();
        args.extend(["--out", &out_s]);
        if let Some(j) = jobs {
            args.extend(["--jobs", j]);
        }
        cli(&args)?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure(outputs.windows(2).all(|w| w[0] == w[1]), || {
        "bootstrap output differs between runs".into()
    })?;

    // every label has tp = fp = fn = 1, so every resample scores 0.5
    let labels = ["A01B", "B60L", "C12N", "G06F"];
    let recs: Vec<PredictionRecord> = (0..4)
        .map(|i| PredictionRecord {
            id: format!("d{i}"),
            gold: BTreeSet::from([code(labels[i]), code(labels[(i + 1) % 4])]),
            predicted: vec![code(labels[i]), code(labels[(i + 2) % 4])],
        })
        .collect();
    let eval = evaluate(&recs, &MetricOptions::default()).map_err(|e| e.to_string())?;
    for metric in [BootstrapMetric::MicroF1, BootstrapMetric::MacroF1] {
        let ci = bootstrap_ci(eval.subclass_table(), metric, &BootstrapConfig::default())
            .map_err(|e| e.to_string())?;
        ensure(ci.upper - ci.lower == 0.0 && ci.point == 0.5, || {
            format!("{metric:?}: constant table gives {ci:?}")
        })?;
    }
    Ok("five runs across --jobs settings are byte-identical; constant table width is 0".into())
}

fn criterion_8() -> Check {
    let records = load_costs(fixtures().join("costs.csv")).map_err(|e| e.to_string())?;
    let find = |setting: Setting, model: &str| {
        records
            .iter()
            .find(|r| r.stage == Stage::Inference && r.setting == setting && r.model == model)
            .ok_or_else(|| format!("no inference row for {model} / {setting}"))
    };
    let bert = per_patent(find(Setting::EncodersFull, "BERT")?).map_err(|e| e.to_string())?;
    ensure(bert.wh == 0.010 * 1000.0 / 10000.0, || {
        format!("BERT Wh/patent {}", bert.wh)
    })?;
    near(bert.wh, 1.0e-3, 1e-18, "BERT Wh/patent")?;
    ensure(format_quantity(bert.wh) == "1.0e-3", || {
        format!("BERT shown as {}", format_quantity(bert.wh))
    })?;
    let qwen = per_patent(find(Setting::ZeroShot, "Qwen")?).map_err(|e| e.to_string())?;
    ensure(qwen.seconds == 65.0 * 60.0 / 10000.0, || {
        format!("Qwen s/patent {}", qwen.seconds)
    })?;
    near(qwen.seconds, 0.39, 1e-15, "Qwen s/patent")?;
    ensure(format_quantity(qwen.seconds) == "0.4", || {
        format!("Qwen shown as {}", format_quantity(qwen.seconds))
    })?;
    for r in records.iter().filter(|r| r.stage == Stage::Inference) {
        let n = r.n_patents.unwrap() as f64;
        let p = per_patent(r).map_err(|e| e.to_string())?;
        ensure(
            p.seconds == r.time_min * 60.0 / n
                && p.wh == r.energy_kwh * 1000.0 / n
                && p.grams == r.co2_kg * 1000.0 / n,
            || format!("{} / {}: {p:?}", r.model, r.setting),
        )?;
    }
    let training = records
        .iter()
        .find(|r| r.stage == Stage::Training)
        .ok_or("no training row")?;
    ensure(per_patent(training).is_err(), || {
        "training rows must have no per-patent cost".into()
    })?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scores = tmp.path().join("scores.csv");
    std::fs::write(
        &scores,
        "model,setting,micro_f1\nBERT,Encoders (Full),0.43\nQwen,Zero-shot,0.278\n",
    )
    .map_err(|e| e.to_string())?;
    let out = tmp.path().join("costs");
    cli(&[
        "costs",
        "--costs",
        &fx("costs.csv"),
        "--scores",
        &scores.to_string_lossy(),
        "--out",
        &out.to_string_lossy(),
    ])?;
    let csv = read(&out.join("per_patent.csv"))?;
    ensure(
        csv.lines()
            .any(|l| l.contains("Qwen") && l.contains(",0.4,")),
        || format!("per_patent.csv lacks Qwen 0.4:\n{csv}"),
    )?;
    ensure(
        csv.lines()
            .any(|l| l.contains("BERT") && l.contains(",1.0e-3,")),
        || format!("per_patent.csv lacks BERT 1.0e-3:\n{csv}"),
    )?;
    Ok(format!(
        "BERT {} Wh/patent shown 1.0e-3; Qwen {} s/patent shown 0.4",
        bert.wh, qwen.seconds
    ))
}

const REGIMES: [&str; 4] = ["zero_shot", "few_shot", "zero_shot_rag", "few_shot_rag"];

fn criterion_9() -> Check {
    let golden = fixtures().join("golden_prompts");
    let sums = read(&golden.join("SHA256SUMS"))?;
    let mut verified = 0;
    for line in sums.lines() {
        let (hash, file) = line.split_once("  ").ok_or("malformed SHA256SUMS")?;
        let bytes = std::fs::read(golden.join(file)).map_err(|e| e.to_string())?;
        ensure(hex::encode(Sha256::digest(&bytes)) == hash, || {
            format!("{file}: checksum mismatch")
        })?;
        verified += 1;
    }
    ensure(verified == 8, || {
        format!("{verified} checksummed golden files")
    })?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let allowed = tmp
        .path()
        .join("allowed.jsonl")
        .to_string_lossy()
        .into_owned();
    cli(&[
        "retrieve",
        "--embeddings",
        &fx("embeddings.jsonl"),
        "--queries",
        &fx("queries.jsonl"),
        "--out",
        &allowed,
    ])?;
    let meta = read_json(&golden.join("meta.json"))?;
    let patent = meta["patent_id"]
        .as_str()
        .ok_or("meta.json lacks patent_id")?;
    for regime in REGIMES {
        let out = tmp.path().join(regime).to_string_lossy().into_owned();
        let (test, train, defs) = (fx("test.jsonl"), fx("train.jsonl"), fx("definitions.txt"));
        let mut args = vec!["prompt", "--regime", regime, "--test", &test, "--out", &out];
        args.extend([
            "--train",
            &train,
            "--definitions",
            &defs,
            "--allowed",
            &allowed,
        ]);
        let args: Vec<String> = args.into_iter().map(String::from).collect();
        cli(&prune_unused(&args, regime))?;
        let prompts = read(&Path::new(&out).join("prompts.jsonl"))?;
        let bundle: Value = prompts
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .find(|b| b["id"] == patent)
            .ok_or_else(|| format!("{regime}: no prompt for {patent}"))?;
        for part in ["system", "user"] {
            let want = read(&golden.join(format!("{regime}.{part}.txt")))?;
            ensure(bundle[part].as_str() == Some(want.as_str()), || {
                format!("{regime} {part} prompt differs from the golden file")
            })?;
        }
        let ids = bundle["fewshot_ids"].as_array().map_or(0, Vec::len);
        let want_ids = &meta["regimes"][regime]["fewshot_ids"];
        ensure(bundle["fewshot_ids"] == *want_ids, || {
            format!("{regime}: few-shot ids {}", bundle["fewshot_ids"])
        })?;
        ensure(
            bundle["allowed_codes"] == meta["regimes"][regime]["allowed_codes"],
            || format!("{regime}: allowed codes differ"),
        )?;
        if regime.starts_with("few") {
            ensure(ids == 5, || format!("{regime}: {ids} few-shot examples"))?;
        }
    }
    Ok(
        "8 checksummed golden files; all four regimes render byte-identical, 5 few-shot examples"
            .into(),
    )
}

/// Drop the sources a regime does not take, so each prompt run passes only
/// what it needs.
fn prune_unused(args: &[String], regime: &str) -> Vec<String> {
    let fewshot = regime.starts_with("few");
    let rag = regime.ends_with("rag");
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let skip = match args[i].as_str() {
            "--train" => !fewshot,
            "--definitions" | "--allowed" => !rag,
            _ => false,
        };
        if skip {
            i += 2;
            continue;
        }
        out.push(args[i].clone());
        i += 1;
    }
    out
}

fn load_rows(path: &Path) -> Result<Docs, String> {
    read(path)?
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).map_err(|e| e.to_string())?;
            let strings = |k: &str| -> Vec<String> {
                v[k].as_array()
                    .into_iter()
                    .flatten()
                    .map(|s| s.as_str().unwrap_or_default().to_string())
                    .collect()
            };
            Ok((
                strings("gold_labels").into_iter().collect(),
                strings("pred_labels"),
            ))
        })
        .collect()
}

fn report_matches(
    metrics: &Value,
    docs: &[(BTreeSet<String>, Vec<String>)],
    what: &str,
) -> Result<(), String> {
    let want = recount(docs);
    let check = |v: &Value, w: (f64, f64, f64), name: &str| -> Result<(), String> {
        for (k, x) in [("precision", w.0), ("recall", w.1), ("f1", w.2)] {
            near(
                v[k].as_f64()
                    .ok_or_else(|| format!("{what}: {name}.{k} missing"))?,
                x,
                TOL,
                &format!("{what} {name}.{k}"),
            )?;
        }
        Ok(())
    };
    check(&metrics["micro"], want.micro, "micro")?;
    check(&metrics["macro"], want.macro_, "macro")?;
    for (i, level) in LEVELS.into_iter().enumerate() {
        let (tp, fp, fn_) = want.levels[i];
        check(
            &metrics["hierarchical"][level.name()],
            prf(tp, fp, fn_),
            level.name(),
        )?;
    }
    check(&metrics["hierarchical"]["pooled"], want.pooled, "pooled")
}

fn golden_matches(metrics: &Value, golden: &Value, what: &str) -> Result<(), String> {
    for key in ["micro", "macro"] {
        for k in ["precision", "recall", "f1"] {
            let (got, want) = (metrics[key][k].as_f64(), golden[key][k].as_f64());
            near(
                got.unwrap_or(f64::NAN),
                want.unwrap_or(f64::NAN),
                TOL,
                &format!("{what} {key}.{k}"),
            )?;
        }
    }
    for level in LEVELS {
        let got = metrics["hierarchical"][level.name()]["f1"]
            .as_f64()
            .unwrap_or(f64::NAN);
        near(
            got,
            golden["hierarchical"][level.name()]["f1"]
                .as_f64()
                .unwrap_or(f64::NAN),
            TOL,
            &format!("{what} {level} f1"),
        )?;
    }
    near(
        metrics["acc_at_1"].as_f64().unwrap_or(f64::NAN),
        golden["acc_at_1"].as_f64().unwrap_or(f64::NAN),
        TOL,
        "acc@1",
    )
}

fn criterion_10() -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let golden = read_json(&fixtures().join("expected/golden_run.json"))?;

    let (allowed, prompts, llm, enc) = (p("allowed.jsonl"), p("prompts"), p("llm"), p("encoder"));
    cli(&[
        "retrieve",
        "--embeddings",
        &fx("embeddings.jsonl"),
        "--queries",
        &fx("queries.jsonl"),
        "--out",
        &allowed,
    ])?;
    let k = golden["llm"]["k"].to_string();
    let sources = [
        "--test",
        &fx("test.jsonl"),
        "--train",
        &fx("train.jsonl"),
        "--definitions",
        &fx("definitions.txt"),
        "--allowed",
        &allowed,
    ]
    .map(String::from);
    let mut args: Vec<String> = [
        "prompt",
        "--regime",
        "few_shot_rag",
        "--k",
        &k,
        "--out",
        &prompts,
    ]
    .map(String::from)
    .to_vec();
    args.extend(sources.iter().cloned());
    cli(&args)?;
    let manifest = Path::new(&prompts)
        .join("manifest.json")
        .to_string_lossy()
        .into_owned();
    let mut args: Vec<String> = [
        "ingest",
        "--manifest",
        &manifest,
        "--generations",
        &fx("generations.jsonl"),
        "--out",
        &llm,
    ]
    .map(String::from)
    .to_vec();
    args.extend(sources.iter().cloned());
    cli(&args)?;
    cli(&[
        "decode",
        "--probs",
        &fx("probs_test.csv"),
        "--test",
        &fx("test.jsonl"),
        "--dev",
        &fx("dev.jsonl"),
        "--dev-probs",
        &fx("probs_dev.csv"),
        "--out",
        &enc,
    ])?;

    let mut summary = Vec::new();
    for (name, dir) in [("llm", &llm), ("encoder", &enc)] {
        let dir = Path::new(dir);
        let docs = load_rows(&dir.join("predictions.jsonl"))?;
        let written = read_json(&dir.join("metrics.json"))?;
        report_matches(&written, &docs, name)?;
        golden_matches(&written, &golden[name]["report"], name)?;

        let again = tmp.path().join(format!("{name}_eval"));
        let preds = dir.join("predictions.jsonl").to_string_lossy().into_owned();
        cli(&[
            "evaluate",
            "--predictions",
            &preds,
            "--out",
            &again.to_string_lossy(),
        ])?;
        ensure(read_json(&again.join("metrics.json"))? == written, || {
            format!("{name}: evaluate disagrees with the run report")
        })?;

        let mut cis = Vec::new();
        for i in 0..2 {
            let out = tmp.path().join(format!("{name}_ci{i}.json"));
            cli(&[
                "bootstrap",
                "--predictions",
                &preds,
                "--seed",
                "7",
                "--out",
                &out.to_string_lossy(),
            ])?;
            cis.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        ensure(cis[0] == cis[1], || {
            format!("{name}: bootstrap output not reproducible")
        })?;
        let ci: Value = serde_json::from_slice(&cis[0]).map_err(|e| e.to_string())?;
        for r in ci.as_array().ok_or("bootstrap output is not a list")? {
            let (lo, pt, hi) = (
                r["lower"].as_f64().unwrap(),
                r["point"].as_f64().unwrap(),
                r["upper"].as_f64().unwrap(),
            );
            ensure(lo <= pt && pt <= hi && lo >= 0.0 && hi <= 1.0, || {
                format!("{name}: CI {lo} {pt} {hi}")
            })?;
        }
        summary.push(format!("{name} micro-F1 {}", written["micro"]["f1"]));
    }
    let cal = read_json(&Path::new(&enc).join("calibration.json"))?;
    near(
        cal["threshold"].as_f64().unwrap_or(f64::NAN),
        golden["encoder"]["threshold"].as_f64().unwrap(),
        TOL,
        "calibrated threshold",
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("golden run took {elapsed:?}")
    })?;
    Ok(format!(
        "{} recomputed from predictions.jsonl in {elapsed:.2?}",
        summary.join(", ")
    ))
}

fn main() {
    // libtest-style arguments (filters, --nocapture) are accepted and ignored
    let checks: [Criterion; 10] = [
        (1, "dataset statistics reproduction", criterion_1),
        (2, "metric oracle equivalence", || wrap(criterion_2())),
        (3, "hierarchical propagation", || wrap(criterion_3())),
        (4, "parser fixture suite", || wrap(criterion_4())),
        (5, "decoding contracts", || wrap(criterion_5())),
        (6, "Wilcoxon correctness", || wrap(criterion_6())),
        (7, "bootstrap determinism", || wrap(criterion_7())),
        (8, "cost arithmetic", || wrap(criterion_8())),
        (9, "prompt byte-exactness", || wrap(criterion_9())),
        (10, "synthetic golden run end to end", || {
            wrap(criterion_10())
        }),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut passed = 0;
    for (n, title, check) in checks {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Outcome::Pass(msg) => {
                passed += 1;
                println!("PASS criterion {n}: {title}: {msg}");
            }
            Outcome::Fail(msg) => {
                failed += 1;
                println!("FAIL criterion {n}: {title}: {msg}");
            }
            Outcome::Unavailable(msg) => {
                failed += strict as usize;
                println!("FAIL criterion {n}: {title}: {msg}");
            }
        }
    }
    println!("acceptance: {passed}/10 passed");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn wrap(check: Check) -> Outcome {
    match check {
        Ok(msg) => Outcome::Pass(msg),
        Err(msg) => Outcome::Fail(msg),
    }
}
