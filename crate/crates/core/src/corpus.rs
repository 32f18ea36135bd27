//! Patent datasets: loading, text normalization and label statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{normalize_code, CpcCode};
use crate::PREDICTION_CAP;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "dev" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatentRecord {
    pub id: String,
    pub title: String,
    pub abstract_text: String,
    pub gold_labels: BTreeSet<CpcCode>,
    pub split: Split,
}

impl PatentRecord {
    pub fn text(&self) -> String {
        document_text(&self.title, &self.abstract_text)
    }
}

/// Collapse every run of Unicode whitespace to one space and trim.
pub fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Model input text: `title. abstract`, whitespace-normalized, case kept.
///
/// No period is added when the title already ends in `.`, `!` or `?`.
pub fn document_text(title: &str, abstract_text: &str) -> String {
    let title = collapse_whitespace(title);
    let abstract_text = collapse_whitespace(abstract_text);
    let mut out = title;
    if !out.is_empty() && !out.ends_with(['.', '!', '?']) {
        out.push('.');
    }
    if !abstract_text.is_empty() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&abstract_text);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guess from the file extension; anything that is not `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::Config(format!("unknown corpus schema {other:?}"))),
        }
    }
}

/// A record dropped at load time because none of its labels survived normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedRecord {
    pub id: String,
    pub raw_labels: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct PatentCorpus {
    records: Vec<PatentRecord>,
    index: HashMap<String, usize>,
    provenance: String,
    rejected: Vec<RejectedRecord>,
    dropped_labels: Vec<(String, String)>,
}

impl PatentCorpus {
    pub fn from_records(records: Vec<PatentRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.gold_labels.is_empty() {
                return Err(Error::Invariant(format!(
                    "record {:?} has no gold labels",
                    r.id
                )));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(PatentCorpus {
            records,
            index,
            provenance: provenance.into(),
            rejected: Vec::new(),
            dropped_labels: Vec::new(),
        })
    }

    pub fn records(&self) -> &[PatentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<&PatentRecord> {
        self.records.get(row)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&PatentRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Records that were dropped because they had no valid label.
    pub fn rejected(&self) -> &[RejectedRecord] {
        &self.rejected
    }

    /// `(record id, raw label)` pairs that failed normalization in otherwise valid records.
    pub fn dropped_labels(&self) -> &[(String, String)] {
        &self.dropped_labels
    }
}

#[derive(Deserialize)]
struct RawJsonRecord {
    id: serde_json::Value,
    #[serde(default)]
    title: String,
    #[serde(default, rename = "abstract")]
    abstract_text: String,
    labels: Vec<String>,
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    title: &'a str,
    #[serde(rename = "abstract")]
    abstract_text: &'a str,
    labels: Vec<&'a str>,
}

fn id_string(v: serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

struct CorpusBuilder {
    source: String,
    split: Split,
    records: Vec<PatentRecord>,
    rejected: Vec<RejectedRecord>,
    dropped: Vec<(String, String)>,
}

impl CorpusBuilder {
    fn push(&mut self, id: String, title: String, abstract_text: String, raw_labels: Vec<String>) {
        let mut gold = BTreeSet::new();
        let mut dropped = Vec::new();
        for raw in &raw_labels {
            match normalize_code(raw) {
                Ok(code) => {
                    gold.insert(code);
                }
                Err(_) => dropped.push((id.clone(), raw.clone())),
            }
        }
        if gold.is_empty() {
            self.rejected.push(RejectedRecord { id, raw_labels });
            return;
        }
        self.dropped.extend(dropped);
        self.records.push(PatentRecord {
            id,
            title,
            abstract_text,
            gold_labels: gold,
            split: self.split,
        });
    }

    fn finish(self) -> Result<PatentCorpus> {
        if self.records.is_empty() {
            return Err(Error::EmptyCorpus {
                rejected: self.rejected.into_iter().map(|r| r.id).collect(),
            });
        }
        if !self.rejected.is_empty() {
            log::warn!(
                "{}: rejected {} records with no valid CPC label",
                self.source,
                self.rejected.len()
            );
        }
        let mut corpus = PatentCorpus::from_records(self.records, self.source)?;
        corpus.rejected = self.rejected;
        corpus.dropped_labels = self.dropped;
        Ok(corpus)
    }
}

pub fn read_jsonl<R: BufRead>(reader: R, source: &str, split: Split) -> Result<PatentCorpus> {
    let mut b = CorpusBuilder {
        source: source.to_string(),
        split,
        records: Vec::new(),
        rejected: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawJsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        let id = id_string(raw.id)
            .ok_or_else(|| Error::parse(source, i + 1, "id must be a string or number"))?;
        b.push(id, raw.title, raw.abstract_text, raw.labels);
    }
    b.finish()
}

pub fn read_csv<R: Read>(reader: R, source: &str, split: Split) -> Result<PatentCorpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "title", "abstract", "labels"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            source,
            1,
            format!(
                "expected header {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut b = CorpusBuilder {
        source: source.to_string(),
        split,
        records: Vec::new(),
        rejected: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(source, i + 2, e.to_string()))?;
        let labels = row[3]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        b.push(
            row[0].to_string(),
            row[1].to_string(),
            row[2].to_string(),
            labels,
        );
    }
    b.finish()
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    format: CorpusFormat,
    split: Split,
) -> Result<PatentCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    match format {
        CorpusFormat::Jsonl => read_jsonl(BufReader::new(file), &source, split),
        CorpusFormat::Csv => read_csv(file, &source, split),
    }
}

pub fn write_jsonl<W: Write>(corpus: &PatentCorpus, mut out: W) -> Result<()> {
    for r in corpus.records() {
        let row = JsonRecordOut {
            id: &r.id,
            title: &r.title,
            abstract_text: &r.abstract_text,
            labels: r.gold_labels.iter().map(CpcCode::as_str).collect(),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(corpus: &PatentCorpus, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "title", "abstract", "labels"])?;
    for r in corpus.records() {
        let labels = r
            .gold_labels
            .iter()
            .map(CpcCode::as_str)
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([r.id.as_str(), &r.title, &r.abstract_text, &labels])?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubclassCount {
    pub code: CpcCode,
    pub count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub subclass_fraction: f64,
    pub assignment_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySummary {
    pub n_patents: u64,
    pub n_subclasses: u64,
    pub total_assignments: u64,
    pub mean_labels: f64,
    pub median_labels: f64,
    pub p90_labels: u64,
    pub p95_labels: u64,
    pub p99_labels: u64,
    pub min_labels: u64,
    pub max_labels: u64,
    /// Fraction of patents carrying between 1 and 7 labels.
    pub share_within_cap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    /// Descending count, ties in code order.
    pub counts: Vec<SubclassCount>,
    pub coverage: Vec<CoveragePoint>,
    pub labels_per_patent: BTreeMap<usize, u64>,
    pub summary: FrequencySummary,
}

impl FrequencyReport {
    pub fn count(&self, code: &CpcCode) -> u64 {
        self.counts
            .iter()
            .find(|c| &c.code == code)
            .map_or(0, |c| c.count)
    }

    pub fn write_counts_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["code", "count"])?;
        for c in &self.counts {
            w.write_record([c.code.as_str(), &c.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }

    pub fn write_coverage_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subclass_fraction", "assignment_fraction"])?;
        for p in &self.coverage {
            w.write_record([
                p.subclass_fraction.to_string(),
                p.assignment_fraction.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["labels", "patents"])?;
        for (k, v) in &self.labels_per_patent {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))?;
        Ok(())
    }
}

pub fn subclass_counts(records: &[PatentRecord]) -> BTreeMap<CpcCode, u64> {
    let mut counts = BTreeMap::new();
    for r in records {
        for &c in &r.gold_labels {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

/// Nearest-rank percentile of an ascending slice: the value at rank `ceil(q·n)`.
pub(crate) fn nearest_rank(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

pub fn frequency_report(corpus: &PatentCorpus) -> Result<FrequencyReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus {
            rejected: Vec::new(),
        });
    }
    let counts_map = subclass_counts(corpus.records());
    let mut counts: Vec<SubclassCount> = counts_map
        .into_iter()
        .map(|(code, count)| SubclassCount { code, count })
        .collect();
    counts.sort_by(|a, b| b.count.cmp(&a.count).then(a.code.cmp(&b.code)));

    let total: u64 = counts.iter().map(|c| c.count).sum();
    let m = counts.len();
    let mut cumulative = 0u64;
    let coverage = counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            cumulative += c.count;
            CoveragePoint {
                subclass_fraction: (i + 1) as f64 / m as f64,
                assignment_fraction: cumulative as f64 / total as f64,
            }
        })
        .collect();

    let mut per_patent: Vec<u64> = corpus
        .records()
        .iter()
        .map(|r| r.gold_labels.len() as u64)
        .collect();
    per_patent.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &k in &per_patent {
        *histogram.entry(k as usize).or_insert(0u64) += 1;
    }
    let n = per_patent.len();
    let median = if n % 2 == 1 {
        per_patent[n / 2] as f64
    } else {
        (per_patent[n / 2 - 1] + per_patent[n / 2]) as f64 / 2.0
    };
    let within = per_patent
        .iter()
        .filter(|&&k| (1..=PREDICTION_CAP as u64).contains(&k))
        .count();

    Ok(FrequencyReport {
        summary: FrequencySummary {
            n_patents: n as u64,
            n_subclasses: m as u64,
            total_assignments: total,
            mean_labels: total as f64 / n as f64,
            median_labels: median,
            p90_labels: nearest_rank(&per_patent, 0.90),
            p95_labels: nearest_rank(&per_patent, 0.95),
            p99_labels: nearest_rank(&per_patent, 0.99),
            min_labels: per_patent[0],
            max_labels: per_patent[n - 1],
            share_within_cap: within as f64 / n as f64,
        },
        counts,
        coverage,
        labels_per_patent: histogram,
    })
}

/// Pearson correlation of `log10(count + 1)` between two corpora over the
/// union of their subclasses (absent labels count as zero).
pub fn cross_split_frequency_correlation(a: &PatentCorpus, b: &PatentCorpus) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCorpus {
            rejected: Vec::new(),
        });
    }
    let ca = subclass_counts(a.records());
    let cb = subclass_counts(b.records());
    let union: BTreeSet<CpcCode> = ca.keys().chain(cb.keys()).copied().collect();
    let xs: Vec<f64> = union
        .iter()
        .map(|c| (ca.get(c).copied().unwrap_or(0) as f64 + 1.0).log10())
        .collect();
    let ys: Vec<f64> = union
        .iter()
        .map(|c| (cb.get(c).copied().unwrap_or(0) as f64 + 1.0).log10())
        .collect();
    pearson(&xs, &ys)
}

pub(crate) fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
