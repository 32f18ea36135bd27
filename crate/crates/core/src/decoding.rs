//! Decoding encoder probabilities into label sets, with optional masking to
//! per-patent allowed sets and global threshold calibration.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::AllowedSets;
use crate::taxonomy::{normalize_code, CpcCode};
use crate::PREDICTION_CAP;

pub const DEFAULT_GRID_STEP: f64 = 0.005;

/// Per-patent sigmoid outputs, row-major, one column per label.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix {
    ids: Vec<String>,
    labels: Vec<CpcCode>,
    data: Vec<f64>,
    row_of: HashMap<String, usize>,
}

impl ProbabilityMatrix {
    pub fn new(ids: Vec<String>, labels: Vec<CpcCode>, data: Vec<f64>) -> Result<Self> {
        if ids.is_empty() || labels.is_empty() {
            return Err(Error::EmptyInput("probability matrix"));
        }
        if data.len() != ids.len() * labels.len() {
            return Err(Error::Alignment(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                ids.len(),
                labels.len()
            )));
        }
        let mut cols = HashSet::new();
        for l in &labels {
            if !cols.insert(*l) {
                return Err(Error::DuplicateCode(*l));
            }
        }
        if let Some(bad) = data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invariant(format!(
                "probability {} for {} / {} is outside [0, 1]",
                data[bad],
                ids[bad / labels.len()],
                labels[bad % labels.len()]
            )));
        }
        let mut row_of = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if row_of.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(ProbabilityMatrix {
            ids,
            labels,
            data,
            row_of,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[CpcCode] {
        &self.labels
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.labels.len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.row_of.get(id).copied()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.labels.iter().map(|c| c.to_string()));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(i).iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }
}

fn check_probability(source: &str, line: usize, p: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::parse(
            source,
            line,
            format!("probability {p} outside [0, 1]"),
        ))
    }
}

/// CSV with header `id,<code1>,<code2>,...`.
pub fn read_matrix_csv<R: Read>(reader: R, source: &str) -> Result<ProbabilityMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("id") || header.len() < 2 {
        return Err(Error::parse(source, 1, "header must be id,<code>,..."));
    }
    let labels = header
        .iter()
        .skip(1)
        .map(|h| normalize_code(h).map_err(|e| Error::parse(source, 1, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let (mut ids, mut data) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::parse(
                source,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        ids.push(rec[0].to_string());
        for field in rec.iter().skip(1) {
            let p: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(source, line, format!("not a number: {field:?}")))?;
            data.push(check_probability(source, line, p)?);
        }
    }
    ProbabilityMatrix::new(ids, labels, data)
}

#[derive(Deserialize)]
struct ProbLine {
    id: String,
    probs: BTreeMap<String, f64>,
}

/// JSONL rows `{"id": str, "probs": {code: float}}`; every row must cover
/// the same codes. Columns come out in code order.
pub fn read_matrix_jsonl<R: BufRead>(reader: R, source: &str) -> Result<ProbabilityMatrix> {
    let mut labels: Option<Vec<CpcCode>> = None;
    let (mut ids, mut data) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ProbLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        let mut parsed = BTreeMap::new();
        for (k, p) in row.probs {
            let c = normalize_code(&k).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
            if parsed
                .insert(c, check_probability(source, i + 1, p)?)
                .is_some()
            {
                return Err(Error::parse(
                    source,
                    i + 1,
                    format!("code {c} listed twice"),
                ));
            }
        }
        let codes: Vec<CpcCode> = parsed.keys().copied().collect();
        match &labels {
            None => labels = Some(codes),
            Some(l) if *l != codes => {
                return Err(Error::parse(
                    source,
                    i + 1,
                    "row covers a different label set",
                ))
            }
            Some(_) => {}
        }
        ids.push(row.id);
        data.extend(parsed.into_values());
    }
    ProbabilityMatrix::new(ids, labels.unwrap_or_default(), data)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<ProbabilityMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_matrix_csv(file, &source)
    } else {
        read_matrix_jsonl(BufReader::new(file), &source)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub threshold: f64,
    pub cap: usize,
}

impl DecoderConfig {
    pub fn new(threshold: f64, cap: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        if cap == 0 {
            return Err(Error::Config("cap must be at least 1".into()));
        }
        Ok(DecoderConfig { threshold, cap })
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            threshold: 0.5,
            cap: PREDICTION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedRow {
    pub id: String,
    pub labels: Vec<CpcCode>,
    pub scores: Vec<f64>,
    /// True when nothing cleared the threshold and the argmax was taken.
    pub fallback: bool,
}

fn by_score<'a>(labels: &'a [CpcCode], row: &'a [f64]) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| row[b].total_cmp(&row[a]).then(labels[a].cmp(&labels[b]))
}

/// Candidate columns for one row: all of them, or those whose code is in
/// the patent's allowed set. Allowed codes outside the label space are
/// ignored.
fn candidate_columns(
    probs: &ProbabilityMatrix,
    i: usize,
    mask: Option<&AllowedSets>,
) -> Result<Vec<usize>> {
    let Some(mask) = mask else {
        return Ok((0..probs.labels.len()).collect());
    };
    let id = &probs.ids[i];
    let allowed = mask
        .get(id)
        .ok_or_else(|| Error::Alignment(format!("no allowed set for {id:?}")))?;
    let cols: Vec<usize> = (0..probs.labels.len())
        .filter(|&c| allowed.contains(&probs.labels[c]))
        .collect();
    if cols.is_empty() {
        return Err(Error::Alignment(format!(
            "allowed set for {id:?} shares no code with the label space"
        )));
    }
    Ok(cols)
}

fn decode_row(
    probs: &ProbabilityMatrix,
    i: usize,
    config: &DecoderConfig,
    cols: Vec<usize>,
) -> DecodedRow {
    let row = probs.row(i);
    let order = by_score(&probs.labels, row);
    let mut selected: Vec<usize> = cols
        .iter()
        .copied()
        .filter(|&c| row[c] > config.threshold)
        .collect();
    let fallback = selected.is_empty();
    if fallback {
        selected.push(
            *cols
                .iter()
                .min_by(|a, b| order(a, b))
                .expect("candidate columns are non-empty"),
        );
    }
    selected.sort_by(&order);
    selected.truncate(config.cap);
    DecodedRow {
        id: probs.ids[i].clone(),
        labels: selected.iter().map(|&c| probs.labels[c]).collect(),
        scores: selected.iter().map(|&c| row[c]).collect(),
        fallback,
    }
}

/// Threshold, argmax fallback, cap. Output labels are ordered by descending
/// probability, ties by code.
pub fn decode(
    probs: &ProbabilityMatrix,
    config: &DecoderConfig,
    mask: Option<&AllowedSets>,
) -> Result<Vec<DecodedRow>> {
    (0..probs.n_rows())
        .into_par_iter()
        .map(|i| {
            Ok(decode_row(
                probs,
                i,
                config,
                candidate_columns(probs, i, mask)?,
            ))
        })
        .collect()
}

/// Thresholds `0, step, 2·step, ...` up to and including 1.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::Config(format!("grid step {step} outside (0, 0.5]")));
    }
    let mut grid: Vec<f64> = (0..)
        .map(|i| i as f64 * step)
        .take_while(|t| *t < 1.0 - 1e-12)
        .collect();
    grid.push(1.0);
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub micro_f1: f64,
    pub grid_step: f64,
    /// `(threshold, micro-F1)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// A dev row prepared for fast threshold sweeps: candidate scores sorted
/// descending, with a running count of gold hits.
struct SweepRow {
    scores_desc: Vec<f64>,
    hits_prefix: Vec<u32>,
    gold: u32,
}

impl SweepRow {
    fn counts(&self, tau: f64, cap: usize) -> (u64, u64, u64) {
        let above = self.scores_desc.partition_point(|&p| p > tau);
        let kept = above.clamp(1, cap);
        let tp = u64::from(self.hits_prefix[kept]);
        (tp, kept as u64 - tp, u64::from(self.gold) - tp)
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if tp == 0 || denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Global threshold maximizing dev micro-F1 over the grid; ties go to the
/// smaller threshold.
pub fn calibrate_threshold(
    dev_probs: &ProbabilityMatrix,
    dev_gold: &[BTreeSet<CpcCode>],
    grid_step: f64,
    cap: usize,
    mask: Option<&AllowedSets>,
) -> Result<CalibrationResult> {
    if dev_gold.len() != dev_probs.n_rows() {
        return Err(Error::Alignment(format!(
            "{} gold sets for {} probability rows",
            dev_gold.len(),
            dev_probs.n_rows()
        )));
    }
    if cap == 0 {
        return Err(Error::Config("cap must be at least 1".into()));
    }
    let grid = threshold_grid(grid_step)?;
    let rows = (0..dev_probs.n_rows())
        .map(|i| {
            let mut cols = candidate_columns(dev_probs, i, mask)?;
            let row = dev_probs.row(i);
            cols.sort_by(by_score(&dev_probs.labels, row));
            let mut hits_prefix = Vec::with_capacity(cols.len() + 1);
            hits_prefix.push(0u32);
            for &c in &cols {
                let hit = u32::from(dev_gold[i].contains(&dev_probs.labels[c]));
                hits_prefix.push(hits_prefix.last().unwrap() + hit);
            }
            Ok(SweepRow {
                scores_desc: cols.iter().map(|&c| row[c]).collect(),
                hits_prefix,
                gold: dev_gold[i].len() as u32,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let curve: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&tau| {
            let (tp, fp, fn_) = rows.iter().fold((0, 0, 0), |acc, r| {
                let (a, b, c) = r.counts(tau, cap);
                (acc.0 + a, acc.1 + b, acc.2 + c)
            });
            (tau, f1(tp, fp, fn_))
        })
        .collect();
    let (threshold, micro_f1) =
        curve
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |best, (t, f)| {
                if f > best.1 {
                    (t, f)
                } else {
                    best
                }
            });
    Ok(CalibrationResult {
        threshold,
        micro_f1,
        grid_step,
        curve,
    })
}
