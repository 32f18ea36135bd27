//! Time, energy and emission accounting, and the accuracy versus energy trade-off.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Training,
    Inference,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "training" => Ok(Stage::Training),
            "inference" => Ok(Stage::Inference),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

/// Experimental setting a cost row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Encoder fine-tuning.
    Encoder,
    Lora,
    EncodersFull,
    EncodersTopK,
    ZeroShot,
    FewShot,
    ZeroShotRag,
    FewShotRag,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Encoder => "Encoder",
            Setting::Lora => "LoRA",
            Setting::EncodersFull => "Encoders (Full)",
            Setting::EncodersTopK => "Encoders (Top-K=20)",
            Setting::ZeroShot => "Zero-shot",
            Setting::FewShot => "Few-shot",
            Setting::ZeroShotRag => "Zero-shot + RAG",
            Setting::FewShotRag => "Few-shot + RAG",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            Setting::Encoder | Setting::EncodersFull | Setting::EncodersTopK
        )
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    /// Case and punctuation are ignored: `Zero-shot + RAG`, `zero_shot_rag`
    /// and `ZeroShotRAG` all parse.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        match key.as_str() {
            "encoder" | "encoders" => Ok(Setting::Encoder),
            "lora" => Ok(Setting::Lora),
            "encodersfull" | "encoderfull" | "full" => Ok(Setting::EncodersFull),
            "encoderstopk20" | "encoderstopk" | "encodertopk" | "encodertopk20" | "topk"
            | "topk20" => Ok(Setting::EncodersTopK),
            "zeroshot" => Ok(Setting::ZeroShot),
            "fewshot" => Ok(Setting::FewShot),
            "zeroshotrag" => Ok(Setting::ZeroShotRag),
            "fewshotrag" => Ok(Setting::FewShotRag),
            _ => Err(Error::Config(format!("unknown setting {s:?}"))),
        }
    }
}

/// One measured run, totals in minutes, kWh and kg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCostRecord {
    pub stage: Stage,
    pub setting: Setting,
    pub model: String,
    pub time_min: f64,
    pub energy_kwh: f64,
    pub co2_kg: f64,
    /// Patents processed; only meaningful for inference.
    pub n_patents: Option<u64>,
}

pub const COSTS_HEADER: [&str; 7] = [
    "stage",
    "setting",
    "model",
    "time_min",
    "energy_kwh",
    "co2_kg",
    "n_patents",
];

/// Costs CSV with header `stage,setting,model,time_min,energy_kwh,co2_kg,n_patents`.
pub fn read_costs<R: Read>(reader: R, source: &str) -> Result<Vec<RunCostRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != COSTS_HEADER {
        return Err(Error::parse(
            source,
            1,
            format!("expected header {}", COSTS_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != COSTS_HEADER.len() {
            return Err(Error::parse(
                source,
                line,
                format!("expected 7 fields, found {}", rec.len()),
            ));
        }
        let parse_err = |e: Error| Error::parse(source, line, e.to_string());
        let stage: Stage = rec[0].parse().map_err(parse_err)?;
        let setting: Setting = rec[1].parse().map_err(parse_err)?;
        let quantity = |idx: usize, field: &'static str| -> Result<f64> {
            let v: f64 = rec[idx].parse().map_err(|_| {
                Error::parse(
                    source,
                    line,
                    format!("{field} is not a number: {:?}", &rec[idx]),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(source, line, format!("{field} is not finite")));
            }
            if v < 0.0 {
                return Err(Error::NegativeQuantity {
                    source_name: source.to_string(),
                    line,
                    field,
                    value: v,
                });
            }
            Ok(v)
        };
        let time_min = quantity(3, "time_min")?;
        let energy_kwh = quantity(4, "energy_kwh")?;
        let co2_kg = quantity(5, "co2_kg")?;
        let n_raw = rec[6].trim();
        let n_patents = match (stage, n_raw.is_empty()) {
            (Stage::Training, true) => None,
            (Stage::Training, false) => {
                log::warn!("{source}:{line}: n_patents ignored for a training row");
                None
            }
            (Stage::Inference, true) => {
                return Err(Error::parse(source, line, "inference rows need n_patents"))
            }
            (Stage::Inference, false) => {
                let n: i64 = n_raw.parse().map_err(|_| {
                    Error::parse(
                        source,
                        line,
                        format!("n_patents is not an integer: {n_raw:?}"),
                    )
                })?;
                if n < 1 {
                    return Err(Error::parse(source, line, "n_patents must be at least 1"));
                }
                Some(n as u64)
            }
        };
        out.push(RunCostRecord {
            stage,
            setting,
            model: rec[2].to_string(),
            time_min,
            energy_kwh,
            co2_kg,
            n_patents,
        });
    }
    Ok(out)
}

pub fn load_costs(path: impl AsRef<Path>) -> Result<Vec<RunCostRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_costs(file, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerPatent {
    pub seconds: f64,
    pub wh: f64,
    pub grams: f64,
}

pub fn per_patent(record: &RunCostRecord) -> Result<PerPatent> {
    let n = match (record.stage, record.n_patents) {
        (Stage::Inference, Some(n)) if n >= 1 => n as f64,
        (Stage::Inference, _) => {
            return Err(Error::Invariant(
                "inference record without a patent count".into(),
            ))
        }
        (Stage::Training, _) => return Err(Error::WrongStage),
    };
    Ok(PerPatent {
        seconds: record.time_min * 60.0 / n,
        wh: record.energy_kwh * 1000.0 / n,
        grams: record.co2_kg * 1000.0 / n,
    })
}

/// Display form: one decimal from 0.1 upwards, otherwise two significant
/// figures in scientific notation (`1.0e-3`). Stored values are untouched.
pub fn format_quantity(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.abs() >= 0.1 {
        return format!("{v:.1}");
    }
    format!("{v:.1e}")
}

/// Join key: model label plus setting.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub model: String,
    pub setting: Setting,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", self.model, self.setting)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub model: String,
    pub setting: Setting,
    pub micro_f1: f64,
    pub time_min: f64,
    pub energy_kwh: f64,
    pub co2_kg: f64,
    pub per_patent: PerPatent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeoffTable {
    pub rows: Vec<TradeoffRow>,
    /// Scored runs with no inference cost record.
    pub unmatched_metrics: Vec<RunKey>,
    /// Inference cost records with no scored run.
    pub unmatched_costs: Vec<RunKey>,
}

/// Inner join of micro-F1 scores with inference cost records, best first.
pub fn tradeoff_table(metrics: &[(RunKey, f64)], costs: &[RunCostRecord]) -> Result<TradeoffTable> {
    let mut scores = BTreeMap::new();
    for (k, f1) in metrics {
        if scores.insert(k.clone(), *f1).is_some() {
            return Err(Error::DuplicateKey(k.to_string()));
        }
    }
    let mut measured = BTreeMap::new();
    for c in costs.iter().filter(|c| c.stage == Stage::Inference) {
        let key = RunKey {
            model: c.model.clone(),
            setting: c.setting,
        };
        if measured.insert(key.clone(), c).is_some() {
            return Err(Error::DuplicateKey(key.to_string()));
        }
    }
    let mut table = TradeoffTable::default();
    for (key, &micro_f1) in &scores {
        match measured.get(key) {
            Some(c) => table.rows.push(TradeoffRow {
                model: key.model.clone(),
                setting: key.setting,
                micro_f1,
                time_min: c.time_min,
                energy_kwh: c.energy_kwh,
                co2_kg: c.co2_kg,
                per_patent: per_patent(c)?,
            }),
            None => table.unmatched_metrics.push(key.clone()),
        }
    }
    table.unmatched_costs = measured
        .keys()
        .filter(|k| !scores.contains_key(*k))
        .cloned()
        .collect();
    table.rows.sort_by(|a, b| {
        b.micro_f1
            .total_cmp(&a.micro_f1)
            .then_with(|| a.model.cmp(&b.model))
            .then(a.setting.cmp(&b.setting))
    });
    Ok(table)
}

impl TradeoffTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "setting",
            "micro_f1",
            "time_min",
            "energy_kwh",
            "co2_kg",
            "s_per_patent",
            "wh_per_patent",
            "g_per_patent",
            "s_per_patent_display",
            "wh_per_patent_display",
            "g_per_patent_display",
        ])?;
        for r in &self.rows {
            let p = r.per_patent;
            w.write_record([
                r.model.clone(),
                r.setting.to_string(),
                r.micro_f1.to_string(),
                r.time_min.to_string(),
                r.energy_kwh.to_string(),
                r.co2_kg.to_string(),
                p.seconds.to_string(),
                p.wh.to_string(),
                p.grams.to_string(),
                format_quantity(p.seconds),
                format_quantity(p.wh),
                format_quantity(p.grams),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }

    /// Scatter data: energy on a log x axis against micro-F1, with the best
    /// encoder score as a horizontal reference line.
    pub fn plot_data(&self) -> PlotData {
        let reference = self
            .rows
            .iter()
            .filter(|r| r.setting.is_encoder())
            .max_by(|a, b| {
                a.micro_f1
                    .total_cmp(&b.micro_f1)
                    .then_with(|| b.model.cmp(&a.model))
            })
            .map(|r| ReferenceLine {
                y: r.micro_f1,
                label: format!("{} ({})", r.model, r.setting),
            });
        PlotData {
            x: "energy_kwh".into(),
            x_log_scale: true,
            y: "micro_f1".into(),
            points: self
                .rows
                .iter()
                .map(|r| PlotPoint {
                    model: r.model.clone(),
                    setting: r.setting,
                    x: r.energy_kwh,
                    y: r.micro_f1,
                })
                .collect(),
            reference_line: reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub model: String,
    pub setting: Setting,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub y: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x: String,
    pub x_log_scale: bool,
    pub y: String,
    pub points: Vec<PlotPoint>,
    pub reference_line: Option<ReferenceLine>,
}
