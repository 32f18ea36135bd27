//! End-to-end runs: prompt preparation and generation ingest for prompted
//! models, probability decoding for encoders, and paired run comparison.
//!
//! Every run produces `predictions.jsonl` rows that carry gold and predicted
//! labels, so all metrics can be recomputed from that file alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PatentCorpus;
use crate::costs::Setting;
use crate::decoding::{
    calibrate_threshold, decode, CalibrationResult, DecoderConfig, ProbabilityMatrix,
    DEFAULT_GRID_STEP,
};
use crate::error::{Error, Result};
use crate::metrics::{
    confusion, evaluate, observed_labels, Evaluation, MacroUniverse, MetricOptions,
    PredictionRecord,
};
use crate::postparse::{parse_output, Dropped, Generation, ParseOptions, ParsePath};
use crate::prompting::{
    build_fewshot_block, format_allowed_block, render_prompt, FewShotConfig, PromptBundle, Regime,
};
use crate::retrieval::{AllowedLabelSet, AllowedSets, TfidfConfig, TfidfIndex, DEFAULT_TOP_K};
use crate::stats::{
    delta_series, per_label_f1, stratify, wilcoxon, Alternative, Band, DeltaSeries,
    PairedTestResult, StratifiedLabels, ZeroMode,
};
use crate::taxonomy::{CpcCode, DefinitionCatalog, Label, Level};
use crate::PREDICTION_CAP;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROMPTS_FILE: &str = "prompts.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    LlmPrompted,
    EncoderDecoded,
}

/// Everything that influences the predictions of a run. Its digest ties
/// generations back to the prompts they were produced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub kind: PipelineKind,
    pub regime: Option<Regime>,
    pub top_k: usize,
    pub fewshot: Option<FewShotConfig>,
    /// Decision threshold; `None` means calibrate on a dev split.
    pub threshold: Option<f64>,
    pub grid_step: f64,
    pub cap: usize,
    pub enforce_nonempty: bool,
    /// Encoder runs only: restrict decoding to each patent's allowed set.
    pub constrained: bool,
    pub seed: u64,
}

impl RunConfig {
    pub fn llm(regime: Regime) -> Self {
        RunConfig {
            kind: PipelineKind::LlmPrompted,
            regime: Some(regime),
            top_k: DEFAULT_TOP_K,
            fewshot: regime.uses_fewshot().then(FewShotConfig::default),
            threshold: None,
            grid_step: DEFAULT_GRID_STEP,
            cap: PREDICTION_CAP,
            enforce_nonempty: true,
            constrained: regime.uses_allowed(),
            seed: 0,
        }
    }

    pub fn encoder(threshold: Option<f64>, constrained: bool) -> Self {
        RunConfig {
            kind: PipelineKind::EncoderDecoded,
            regime: None,
            top_k: DEFAULT_TOP_K,
            fewshot: None,
            threshold,
            grid_step: DEFAULT_GRID_STEP,
            cap: PREDICTION_CAP,
            enforce_nonempty: true,
            constrained,
            seed: 0,
        }
    }

    /// sha256 over the config serialized as JSON with sorted keys.
    pub fn digest(&self) -> Result<String> {
        let canonical = sorted(serde_json::to_value(self)?);
        Ok(hex::encode(Sha256::digest(
            serde_json::to_string(&canonical)?.as_bytes(),
        )))
    }

    fn validate(&self) -> Result<()> {
        if self.cap == 0 {
            return Err(Error::Config("cap must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        match (self.kind, self.regime) {
            (PipelineKind::LlmPrompted, None) => {
                Err(Error::Config("prompted runs need a regime".into()))
            }
            (PipelineKind::EncoderDecoded, Some(r)) => Err(Error::Config(format!(
                "encoder runs take no regime, got {r}"
            ))),
            (PipelineKind::LlmPrompted, Some(r)) if r.uses_fewshot() != self.fewshot.is_some() => {
                Err(Error::Config(format!(
                    "few-shot configuration does not match regime {r}"
                )))
            }
            _ => Ok(()),
        }
    }
}

fn sorted(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let entries: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(entries.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub digest: String,
    /// Model and setting labels used to join runs with cost records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<Setting>,
    /// Threshold actually applied by an encoder run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_used: Option<f64>,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(RunManifest {
            run_id: run_id.into(),
            digest: config.digest()?,
            config,
            model: None,
            setting: None,
            threshold_used: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    /// Fails with `ConfigMismatch` if the stored digest no longer matches
    /// the stored config.
    pub fn verify(&self) -> Result<()> {
        let found = self.config.digest()?;
        if found != self.digest {
            return Err(Error::ConfigMismatch {
                expected: self.digest.clone(),
                found,
            });
        }
        self.config.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub system: String,
    pub user: String,
}

/// One line of `predictions.jsonl`. Fields that do not apply to a run
/// are omitted rather than left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub text: String,
    pub gold_labels: Vec<CpcCode>,
    pub pred_labels: Vec<CpcCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_codes: Option<Vec<CpcCode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_path: Option<ParsePath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<Vec<Dropped>>,
}

impl PredictionRow {
    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.id.clone(),
            gold: self.gold_labels.iter().copied().collect(),
            predicted: self.pred_labels.clone(),
        }
    }
}

pub fn records_from_rows(rows: &[PredictionRow]) -> Vec<PredictionRecord> {
    rows.iter().map(PredictionRow::record).collect()
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], mut out: W) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(reader: R, source: &str) -> Result<Vec<PredictionRow>> {
    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if !seen.insert(row.id.clone()) {
            return Err(Error::DuplicateId(row.id));
        }
        if let Err(e) = row.record().validate() {
            return Err(Error::parse(source, i + 1, e.to_string()));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("predictions file"));
    }
    Ok(rows)
}

/// Metrics straight from prediction rows.
pub fn evaluate_rows(rows: &[PredictionRow], options: &MetricOptions) -> Result<Evaluation> {
    evaluate(&records_from_rows(rows), options)
}

/// Output of a pipeline: manifest, rows sorted by id, and their metrics.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub rows: Vec<PredictionRow>,
    pub evaluation: Evaluation,
}

/// Inputs for a prompted run. `train` is required by few-shot regimes,
/// `catalog` and `allowed` by RAG regimes.
#[derive(Clone, Copy)]
pub struct LlmInputs<'a> {
    pub test: &'a PatentCorpus,
    pub train: Option<&'a PatentCorpus>,
    pub catalog: Option<&'a DefinitionCatalog>,
    pub allowed: Option<&'a AllowedSets>,
}

fn row_allowed(allowed: &AllowedSets, id: &str, k: usize) -> Result<AllowedLabelSet> {
    allowed
        .get(id)
        .map(|s| s.truncated(k))
        .ok_or_else(|| Error::Alignment(format!("no allowed set for {id:?}")))
}

/// Render one prompt per test patent, in corpus order.
pub fn prepare(inputs: &LlmInputs<'_>, manifest: &RunManifest) -> Result<Vec<PromptBundle>> {
    manifest.verify()?;
    let config = &manifest.config;
    let regime = config
        .regime
        .ok_or_else(|| Error::Config("prompted runs need a regime".into()))?;
    let fewshot = match (regime.uses_fewshot(), inputs.train, &config.fewshot) {
        (false, _, _) => None,
        (true, Some(train), Some(fs)) => {
            Some((train, fs, TfidfIndex::fit(train, &TfidfConfig::default())?))
        }
        (true, None, _) => {
            return Err(Error::MissingComponent(format!(
                "{regime} needs a training corpus"
            )))
        }
        (true, Some(_), None) => {
            return Err(Error::Config(format!(
                "{regime} needs a few-shot configuration"
            )))
        }
    };
    let rag = if regime.uses_allowed() {
        let catalog = inputs
            .catalog
            .ok_or_else(|| Error::MissingComponent(format!("{regime} needs label definitions")))?;
        let allowed = inputs
            .allowed
            .ok_or_else(|| Error::MissingComponent(format!("{regime} needs allowed label sets")))?;
        Some((catalog, allowed))
    } else {
        None
    };
    inputs
        .test
        .records()
        .par_iter()
        .map(|patent| {
            let block = match &fewshot {
                Some((train, fs, tfidf)) => {
                    Some(build_fewshot_block(train, fs, tfidf, &patent.text())?)
                }
                None => None,
            };
            let allowed = match rag {
                Some((catalog, sets)) => Some(format_allowed_block(
                    &row_allowed(sets, &patent.id, config.top_k)?,
                    catalog,
                )),
                None => None,
            };
            render_prompt(regime, patent, block.as_ref(), allowed.as_ref())
        })
        .collect()
}

/// Parse supplied generations against freshly rendered prompts and score
/// them. Generations stamped with a different manifest digest are refused.
pub fn ingest(
    inputs: &LlmInputs<'_>,
    manifest: &RunManifest,
    generations: &[Generation],
) -> Result<RunOutput> {
    let prompts = prepare(inputs, manifest)?;
    let config = &manifest.config;
    let mut by_id: HashMap<&str, &Generation> = HashMap::with_capacity(generations.len());
    for g in generations {
        if let Some(d) = &g.manifest_digest {
            if *d != manifest.digest {
                return Err(Error::ConfigMismatch {
                    expected: manifest.digest.clone(),
                    found: d.clone(),
                });
            }
        }
        if by_id.insert(g.id.as_str(), g).is_some() {
            return Err(Error::DuplicateId(g.id.clone()));
        }
    }
    let missing: Vec<String> = inputs
        .test
        .records()
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGeneration(missing));
    }
    let extra = by_id.len() - inputs.test.len();
    if extra > 0 {
        log::warn!("{extra} generations have no test patent and are ignored");
    }

    let rag = config.regime.is_some_and(Regime::uses_allowed);
    let mut rows = inputs
        .test
        .records()
        .par_iter()
        .zip(prompts)
        .map(|(patent, bundle)| {
            let raw = &by_id[patent.id.as_str()].raw_output;
            let allowed = match (rag, inputs.allowed) {
                (true, Some(sets)) => Some(row_allowed(sets, &patent.id, config.top_k)?),
                _ => None,
            };
            let outcome = parse_output(
                raw,
                &ParseOptions {
                    allowed: allowed.as_ref(),
                    enforce_nonempty: config.enforce_nonempty,
                    cap: config.cap,
                },
            );
            Ok(PredictionRow {
                id: patent.id.clone(),
                text: patent.text(),
                gold_labels: patent.gold_labels.iter().copied().collect(),
                pred_labels: outcome.labels,
                prompt: Some(PromptText {
                    system: bundle.system,
                    user: bundle.user,
                }),
                raw_output: Some(raw.clone()),
                allowed_codes: rag.then_some(bundle.allowed_codes),
                fewshot_ids: (!bundle.fewshot_ids.is_empty()).then_some(bundle.fewshot_ids),
                parse_path: Some(outcome.path),
                dropped: Some(outcome.dropped),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let evaluation = evaluate_rows(&rows, &MetricOptions::default())?;
    Ok(RunOutput {
        manifest: manifest.clone(),
        rows,
        evaluation,
    })
}

/// `prepare` and `ingest` in one call.
pub fn run_llm_pipeline(
    inputs: &LlmInputs<'_>,
    manifest: &RunManifest,
    generations: &[Generation],
) -> Result<RunOutput> {
    ingest(inputs, manifest, generations)
}

/// Gold sets for the rows of `probs`, taken from `corpus` by id.
fn gold_for(probs: &ProbabilityMatrix, corpus: &PatentCorpus) -> Result<Vec<BTreeSet<CpcCode>>> {
    if probs.n_rows() != corpus.len() {
        return Err(Error::Alignment(format!(
            "{} probability rows for {} patents",
            probs.n_rows(),
            corpus.len()
        )));
    }
    probs
        .ids()
        .iter()
        .map(|id| {
            corpus
                .by_id(id)
                .map(|r| r.gold_labels.clone())
                .ok_or_else(|| Error::Alignment(format!("probability row {id:?} has no patent")))
        })
        .collect()
}

/// Encoder probabilities to predictions. The threshold comes from the
/// config, or from calibration on `dev` when the config leaves it open.
pub fn run_encoder_pipeline(
    manifest: &RunManifest,
    test: &PatentCorpus,
    probs: &ProbabilityMatrix,
    dev: Option<(&PatentCorpus, &ProbabilityMatrix)>,
    allowed: Option<&AllowedSets>,
) -> Result<(RunOutput, Option<CalibrationResult>)> {
    manifest.verify()?;
    let config = &manifest.config;
    if config.kind != PipelineKind::EncoderDecoded {
        return Err(Error::Config(
            "manifest does not describe an encoder run".into(),
        ));
    }
    let mask = match (config.constrained, allowed) {
        (true, Some(sets)) => Some(
            sets.iter()
                .map(|(id, s)| (id.clone(), s.truncated(config.top_k)))
                .collect::<AllowedSets>(),
        ),
        (true, None) => {
            return Err(Error::MissingComponent(
                "constrained decoding needs allowed label sets".into(),
            ))
        }
        (false, _) => None,
    };
    let gold = gold_for(probs, test)?;

    let (threshold, calibration) = match (config.threshold, dev) {
        (Some(t), _) => (t, None),
        (None, Some((dev_corpus, dev_probs))) => {
            let dev_gold = gold_for(dev_probs, dev_corpus)?;
            if dev_probs.labels() != probs.labels() {
                return Err(Error::Alignment(
                    "dev and test probabilities use different label columns".into(),
                ));
            }
            let c = calibrate_threshold(
                dev_probs,
                &dev_gold,
                config.grid_step,
                config.cap,
                mask.as_ref(),
            )?;
            (c.threshold, Some(c))
        }
        (None, None) => {
            return Err(Error::Config(
                "no threshold given and no dev split to calibrate on".into(),
            ))
        }
    };
    let decoded = decode(
        probs,
        &DecoderConfig::new(threshold, config.cap)?,
        mask.as_ref(),
    )?;

    let mut rows: Vec<PredictionRow> = decoded
        .into_iter()
        .zip(gold)
        .map(|(d, gold)| {
            let patent = test.by_id(&d.id).expect("ids checked by gold_for");
            PredictionRow {
                allowed_codes: mask.as_ref().map(|m| m[&d.id].codes()),
                id: d.id,
                text: patent.text(),
                gold_labels: gold.into_iter().collect(),
                pred_labels: d.labels,
                prompt: None,
                raw_output: None,
                fewshot_ids: None,
                parse_path: None,
                dropped: None,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let evaluation = evaluate_rows(&rows, &MetricOptions::default())?;
    let mut manifest = manifest.clone();
    manifest.threshold_used = Some(threshold);
    Ok((
        RunOutput {
            manifest,
            rows,
            evaluation,
        },
        calibration,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub lower: f64,
    pub upper: f64,
    /// Alternative per band, read as "run A versus run B".
    pub alternatives: BTreeMap<Band, Alternative>,
    pub zero_mode: ZeroMode,
}

impl Default for CompareConfig {
    /// Rare labels test A > B, frequent labels A < B, the middle band is
    /// two-sided.
    fn default() -> Self {
        CompareConfig {
            lower: 0.2,
            upper: 0.8,
            alternatives: BTreeMap::from([
                (Band::Rare, Alternative::Greater),
                (Band::Medium, Alternative::TwoSided),
                (Band::Frequent, Alternative::Less),
            ]),
            zero_mode: ZeroMode::Wilcox,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandTest {
    pub band: Band,
    pub n_labels: usize,
    pub mean_f1_a: f64,
    pub mean_f1_b: f64,
    pub alternative: Alternative,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PairedTestResult>,
    /// Set when the test could not be run, e.g. all differences are zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub n_docs: usize,
    pub strata: StratifiedLabels,
    pub bands: Vec<BandTest>,
    pub delta: DeltaSeries,
}

/// Per-subclass F1 of two runs over the same gold set, tested band by band
/// with the Wilcoxon signed-rank test.
pub fn compare_runs(
    a: &[PredictionRow],
    b: &[PredictionRow],
    config: &CompareConfig,
) -> Result<CompareReport> {
    let gold_of = |rows: &[PredictionRow]| -> BTreeMap<String, Vec<CpcCode>> {
        rows.iter()
            .map(|r| (r.id.clone(), r.gold_labels.clone()))
            .collect()
    };
    let (ga, gb) = (gold_of(a), gold_of(b));
    if ga != gb {
        let differing = ga
            .keys()
            .chain(gb.keys())
            .find(|id| ga.get(*id) != gb.get(*id))
            .cloned()
            .unwrap_or_default();
        return Err(Error::GoldMismatch(format!(
            "first differing id {differing:?}"
        )));
    }
    let (ra, rb) = (records_from_rows(a), records_from_rows(b));
    let mut universe: BTreeSet<Label> = observed_labels(&ra, Level::Subclass);
    universe.extend(observed_labels(&rb, Level::Subclass));
    let ta = confusion(&ra, Level::Subclass, &universe)?;
    let tb = confusion(&rb, Level::Subclass, &universe)?;
    let fa = per_label_f1(&ta, MacroUniverse::GoldSupported);
    let fb = per_label_f1(&tb, MacroUniverse::GoldSupported);
    let supports: BTreeMap<Label, u64> = ta
        .rows
        .iter()
        .filter(|r| r.support > 0)
        .map(|r| (r.label, r.support))
        .collect();

    let strata = stratify(&supports, config.lower, config.upper)?;
    let mut bands = Vec::new();
    for band in Band::ALL {
        let members: Vec<&Label> = strata.members(band).collect();
        let xs: Vec<f64> = members.iter().map(|l| fa[*l]).collect();
        let ys: Vec<f64> = members.iter().map(|l| fb[*l]).collect();
        let alternative = config
            .alternatives
            .get(&band)
            .copied()
            .unwrap_or(Alternative::TwoSided);
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let (test, error) = match wilcoxon(&xs, &ys, alternative, config.zero_mode) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        bands.push(BandTest {
            band,
            n_labels: members.len(),
            mean_f1_a: mean(&xs),
            mean_f1_b: mean(&ys),
            alternative,
            test,
            error,
        });
    }
    Ok(CompareReport {
        n_docs: a.len(),
        delta: delta_series(&fa, &fb, &supports)?,
        strata,
        bands,
    })
}
