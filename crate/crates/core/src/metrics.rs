//! Flat and hierarchy-aware multi-label metrics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{expand_label_set, CpcCode, Label, Level};
use crate::PREDICTION_CAP;

/// Gold labels and ranked predictions for one patent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: BTreeSet<CpcCode>,
    pub predicted: Vec<CpcCode>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gold.is_empty() {
            return Err(Error::Invariant(format!(
                "record {:?} has no gold labels",
                self.id
            )));
        }
        if self.predicted.len() > PREDICTION_CAP {
            return Err(Error::Invariant(format!(
                "record {:?} has {} predictions, more than {PREDICTION_CAP}",
                self.id,
                self.predicted.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.predicted.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Invariant(format!(
                "record {:?} predicts {dup} twice",
                self.id
            )));
        }
        Ok(())
    }
}

/// Precision, recall and F1 with 0/0 taken as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub label: Label,
    pub support: u64,
    pub predicted: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl LabelCounts {
    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }
}

/// Per-label confusion counts at one hierarchy level, sorted by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfusionTable {
    pub level: Level,
    pub n_docs: u64,
    pub rows: Vec<LabelCounts>,
}

impl LabelConfusionTable {
    pub fn get(&self, label: &str) -> Option<&LabelCounts> {
        self.rows
            .binary_search_by(|r| r.label.as_str().cmp(label))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn totals(&self) -> (u64, u64, u64) {
        self.rows.iter().fold((0, 0, 0), |acc, r| {
            (acc.0 + r.tp, acc.1 + r.fp, acc.2 + r.fn_)
        })
    }

    /// CSV columns: label, support, predicted_positives, tp, fp, fn, tn,
    /// precision, recall, f1, accuracy.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "label",
            "support",
            "predicted_positives",
            "tp",
            "fp",
            "fn",
            "tn",
            "precision",
            "recall",
            "f1",
            "accuracy",
        ])?;
        for r in &self.rows {
            let m = r.prf();
            w.write_record([
                r.label.to_string(),
                r.support.to_string(),
                r.predicted.to_string(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
                r.tn.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                r.accuracy().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }
}

/// Every label seen in gold or predictions, expanded to `level`.
pub fn observed_labels(records: &[PredictionRecord], level: Level) -> BTreeSet<Label> {
    records
        .iter()
        .flat_map(|r| {
            expand_label_set(&r.gold, level)
                .into_iter()
                .chain(expand_label_set(&r.predicted, level))
        })
        .collect()
}

pub fn confusion(
    records: &[PredictionRecord],
    level: Level,
    label_universe: &BTreeSet<Label>,
) -> Result<LabelConfusionTable> {
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction records"));
    }
    let mut counts: BTreeMap<Label, LabelCounts> = label_universe
        .iter()
        .map(|&label| {
            (
                label,
                LabelCounts {
                    label,
                    support: 0,
                    predicted: 0,
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    tn: 0,
                },
            )
        })
        .collect();
    for r in records {
        let gold = expand_label_set(&r.gold, level);
        let pred = expand_label_set(&r.predicted, level);
        for l in gold.union(&pred) {
            let row = counts
                .get_mut(l)
                .ok_or_else(|| Error::UnknownLabel(l.to_string()))?;
            match (gold.contains(l), pred.contains(l)) {
                (true, true) => row.tp += 1,
                (true, false) => row.fn_ += 1,
                _ => row.fp += 1,
            }
        }
    }
    let n_docs = records.len() as u64;
    let rows = counts
        .into_values()
        .map(|mut r| {
            r.support = r.tp + r.fn_;
            r.predicted = r.tp + r.fp;
            r.tn = n_docs - r.tp - r.fp - r.fn_;
            r
        })
        .collect();
    Ok(LabelConfusionTable {
        level,
        n_docs,
        rows,
    })
}

pub fn micro(table: &LabelConfusionTable) -> Prf {
    let (tp, fp, fn_) = table.totals();
    Prf::from_counts(tp, fp, fn_)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroUniverse {
    /// Labels with gold support in the evaluated records.
    #[default]
    GoldSupported,
    /// Every label in the table.
    FullLabelSpace,
}

pub fn macro_labels(
    table: &LabelConfusionTable,
    universe: MacroUniverse,
) -> impl Iterator<Item = &LabelCounts> {
    table
        .rows
        .iter()
        .filter(move |r| universe == MacroUniverse::FullLabelSpace || r.support > 0)
}

/// Unweighted mean of per-label precision, recall and F1.
pub fn macro_avg(table: &LabelConfusionTable, universe: MacroUniverse) -> Prf {
    let (mut sum, mut n) = (Prf::default(), 0usize);
    for r in macro_labels(table, universe) {
        let m = r.prf();
        sum.precision += m.precision;
        sum.recall += m.recall;
        sum.f1 += m.f1;
        n += 1;
    }
    if n == 0 {
        return Prf::default();
    }
    let n = n as f64;
    Prf {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
    }
}

/// Share of records whose first prediction is a gold label.
pub fn acc_at_1(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction records"));
    }
    let mut hits = 0u64;
    for r in records {
        let first = r
            .predicted
            .first()
            .ok_or_else(|| Error::EmptyPrediction { id: r.id.clone() })?;
        hits += u64::from(r.gold.contains(first));
    }
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalReport {
    pub section: Prf,
    pub class: Prf,
    pub subclass: Prf,
    /// Micro scores over the union of all three levels, i.e. label sets
    /// expanded with every ancestor.
    pub pooled: Prf,
}

impl HierarchicalReport {
    pub fn at(&self, level: Level) -> Prf {
        match level {
            Level::Section => self.section,
            Level::Class => self.class,
            Level::Subclass => self.subclass,
        }
    }
}

fn hierarchical_from_tables(tables: &[LabelConfusionTable; 3]) -> HierarchicalReport {
    let pooled = tables
        .iter()
        .map(|t| t.totals())
        .fold((0, 0, 0), |a, t| (a.0 + t.0, a.1 + t.1, a.2 + t.2));
    HierarchicalReport {
        section: micro(&tables[0]),
        class: micro(&tables[1]),
        subclass: micro(&tables[2]),
        pooled: Prf::from_counts(pooled.0, pooled.1, pooled.2),
    }
}

pub fn hierarchical_report(records: &[PredictionRecord]) -> Result<HierarchicalReport> {
    let tables = level_tables(records, None)?;
    Ok(hierarchical_from_tables(&tables))
}

/// Confusion tables at section, class and subclass level. The universe at
/// each level is everything observed plus the expansion of `label_space`.
pub fn level_tables(
    records: &[PredictionRecord],
    label_space: Option<&BTreeSet<CpcCode>>,
) -> Result<[LabelConfusionTable; 3]> {
    let table = |level| {
        let mut universe = observed_labels(records, level);
        if let Some(space) = label_space {
            universe.extend(expand_label_set(space, level));
        }
        confusion(records, level, &universe)
    };
    Ok([
        table(Level::Section)?,
        table(Level::Class)?,
        table(Level::Subclass)?,
    ])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub macro_universe: MacroUniverse,
    /// Full label space for macro averaging, typically the training labels.
    pub label_space: Option<BTreeSet<CpcCode>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_docs: u64,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
    pub macro_universe: MacroUniverse,
    pub macro_label_count: usize,
    /// `None` when some record has no prediction at all.
    pub acc_at_1: Option<f64>,
    pub hierarchical: HierarchicalReport,
}

/// Full metric report plus the per-level tables it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub tables: [LabelConfusionTable; 3],
}

impl Evaluation {
    pub fn table(&self, level: Level) -> &LabelConfusionTable {
        &self.tables[level as usize]
    }

    pub fn subclass_table(&self) -> &LabelConfusionTable {
        &self.tables[2]
    }
}

pub fn evaluate(records: &[PredictionRecord], options: &MetricOptions) -> Result<Evaluation> {
    for r in records {
        r.validate()?;
    }
    let tables = level_tables(records, options.label_space.as_ref())?;
    let sub = &tables[2];
    let report = MetricReport {
        n_docs: sub.n_docs,
        micro: micro(sub),
        macro_: macro_avg(sub, options.macro_universe),
        macro_universe: options.macro_universe,
        macro_label_count: macro_labels(sub, options.macro_universe).count(),
        acc_at_1: match acc_at_1(records) {
            Ok(v) => Some(v),
            Err(Error::EmptyPrediction { .. }) => None,
            Err(e) => return Err(e),
        },
        hierarchical: hierarchical_from_tables(&tables),
    };
    Ok(Evaluation { report, tables })
}
