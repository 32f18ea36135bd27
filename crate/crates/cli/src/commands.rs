use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use cpc_harness::corpus::{
    cross_split_frequency_correlation, frequency_report, load_corpus, CorpusFormat, PatentCorpus,
    Split,
};
use cpc_harness::costs::{
    format_quantity, load_costs, per_patent, tradeoff_table, RunKey, Setting, Stage,
};
use cpc_harness::decoding::load_matrix;
use cpc_harness::evaluation::{
    compare_runs, evaluate_rows, ingest, prepare, read_predictions, write_predictions,
    CompareConfig, LlmInputs, RunConfig, RunManifest, RunOutput, MANIFEST_FILE, METRICS_FILE,
    PREDICTIONS_FILE, PROMPTS_FILE,
};
use cpc_harness::metrics::{Evaluation, MetricOptions};
use cpc_harness::postparse::{parse_output, read_generations, Dropped, ParseOptions, ParsePath};
use cpc_harness::prompting::{write_prompts, FewShotConfig};
use cpc_harness::retrieval::{
    allowed_set, load_allowed_sets, load_embeddings, read_vectors, write_allowed_set, AllowedSets,
};
use cpc_harness::stats::{bootstrap_ci, Band, BootstrapConfig, BootstrapMetric};
use cpc_harness::taxonomy::{load_definitions, CpcCode, Level};
use cpc_harness::{evaluation, Error};

use crate::output::Outputs;
use crate::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats(a) => stats(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Prompt(a) => prompt(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Parse(a) => parse(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Costs(a) => costs(a),
    }
}

fn corpus(path: &Path, input: &CorpusInput, split: Split) -> Result<PatentCorpus> {
    let format = input
        .input_format
        .unwrap_or_else(|| CorpusFormat::from_path(path));
    let c = load_corpus(path, format, split)?;
    if !c.rejected().is_empty() {
        log::warn!(
            "{}: {} records rejected",
            path.display(),
            c.rejected().len()
        );
    }
    Ok(c)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Serialize)]
struct StatsSummary<'a> {
    corpus: String,
    #[serde(flatten)]
    summary: &'a cpc_harness::corpus::FrequencySummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_frequency_correlation: Option<f64>,
}

fn stats(a: StatsArgs) -> Result<()> {
    let c = corpus(&a.corpus, &a.input, a.split)?;
    let report = frequency_report(&c)?;
    let correlation = match &a.compare_with {
        Some(p) => Some(cross_split_frequency_correlation(
            &c,
            &corpus(p, &a.input, Split::Test)?,
        )?),
        None => None,
    };
    let summary = StatsSummary {
        corpus: path_str(&a.corpus),
        summary: &report.summary,
        log_frequency_correlation: correlation,
    };
    let mut out = Outputs::default();
    match a.format {
        OutFormat::Csv => {
            out.add_with(a.out.join("subclass_counts.csv"), |w| {
                report.write_counts_csv(w)
            })?;
            out.add_with(a.out.join("coverage.csv"), |w| report.write_coverage_csv(w))?;
            out.add_with(a.out.join("labels_per_patent.csv"), |w| {
                report.write_histogram_csv(w)
            })?;
            out.add_json(a.out.join("summary.json"), &summary)?;
        }
        OutFormat::Json => {
            #[derive(Serialize)]
            struct Full<'a> {
                #[serde(flatten)]
                summary: StatsSummary<'a>,
                counts: &'a [cpc_harness::corpus::SubclassCount],
                coverage: &'a [cpc_harness::corpus::CoveragePoint],
                labels_per_patent: &'a BTreeMap<usize, u64>,
            }
            out.add_json(
                a.out.join("stats.json"),
                &Full {
                    summary,
                    counts: &report.counts,
                    coverage: &report.coverage,
                    labels_per_patent: &report.labels_per_patent,
                },
            )?;
        }
    }
    out.commit()
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let matrix = load_embeddings(&a.embeddings)?;
    let queries = read_vectors(&a.queries)?;
    let sets = (0..queries.len())
        .into_par_iter()
        .map(|i| allowed_set(&queries.keys[i], queries.vector(i), &matrix, a.k))
        .collect::<cpc_harness::Result<Vec<_>>>()?;
    let mut out = Outputs::default();
    out.add_with(&a.out, |w| {
        sets.iter().try_for_each(|s| write_allowed_set(s, &mut *w))
    })?;
    out.commit()
}

fn run_id(labels: &RunLabels, out: &Path) -> String {
    labels.run_id.clone().unwrap_or_else(|| {
        out.file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
    })
}

struct LoadedSources {
    test: PatentCorpus,
    train: Option<PatentCorpus>,
    catalog: Option<cpc_harness::taxonomy::DefinitionCatalog>,
    allowed: Option<AllowedSets>,
}

impl LoadedSources {
    fn load(s: &LlmSources) -> Result<Self> {
        Ok(LoadedSources {
            test: corpus(&s.test, &s.input, Split::Test)?,
            train: s
                .train
                .as_deref()
                .map(|p| corpus(p, &s.input, Split::Train))
                .transpose()?,
            catalog: s.definitions.as_deref().map(load_definitions).transpose()?,
            allowed: s.allowed.as_deref().map(load_allowed_sets).transpose()?,
        })
    }

    fn inputs(&self) -> LlmInputs<'_> {
        LlmInputs {
            test: &self.test,
            train: self.train.as_ref(),
            catalog: self.catalog.as_ref(),
            allowed: self.allowed.as_ref(),
        }
    }
}

fn source_paths(s: &LlmSources) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([("test".to_string(), path_str(&s.test))]);
    for (k, v) in [
        ("train", &s.train),
        ("definitions", &s.definitions),
        ("allowed", &s.allowed),
    ] {
        if let Some(p) = v {
            m.insert(k.to_string(), path_str(p));
        }
    }
    m
}

fn prompt(a: PromptArgs) -> Result<()> {
    let mut config = RunConfig::llm(a.regime);
    config.top_k = a.k;
    config.cap = a.cap;
    config.enforce_nonempty = !a.allow_empty;
    if a.regime.uses_fewshot() {
        config.fewshot = Some(FewShotConfig {
            static_indices: a.static_indices.clone(),
            dynamic_count: a.dynamic,
        });
    }
    let mut manifest = RunManifest::new(run_id(&a.labels, &a.out), config)?;
    manifest.model = a.labels.model.clone();
    manifest.setting = a.labels.setting;
    manifest.inputs = source_paths(&a.sources);
    let sources = LoadedSources::load(&a.sources)?;
    let bundles = prepare(&sources.inputs(), &manifest)?;
    manifest
        .outputs
        .insert("prompts".into(), PROMPTS_FILE.into());

    let mut out = Outputs::default();
    out.add_with(a.out.join(PROMPTS_FILE), |w| write_prompts(&bundles, w))?;
    out.add_json(a.out.join(MANIFEST_FILE), &manifest)?;
    out.commit()
}

fn read_manifest(path: &Path) -> Result<RunManifest> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let m: RunManifest = serde_json::from_reader(BufReader::new(file)).map_err(Error::from)?;
    Ok(m)
}

fn write_run(out: &mut Outputs, dir: &Path, run: &RunOutput) -> Result<()> {
    let mut manifest = run.manifest.clone();
    manifest
        .outputs
        .insert("predictions".into(), PREDICTIONS_FILE.into());
    manifest
        .outputs
        .insert("metrics".into(), METRICS_FILE.into());
    out.add_with(dir.join(PREDICTIONS_FILE), |w| {
        write_predictions(&run.rows, w)
    })?;
    add_metrics(out, dir, &run.evaluation)?;
    out.add_json(dir.join(MANIFEST_FILE), &manifest)
}

fn add_metrics(out: &mut Outputs, dir: &Path, evaluation: &Evaluation) -> Result<()> {
    out.add_json(dir.join(METRICS_FILE), &evaluation.report)?;
    for level in Level::ALL {
        let table = evaluation.table(level);
        out.add_with(dir.join(format!("per_label_{}.csv", level.name())), |w| {
            table.write_csv(w)
        })?;
    }
    Ok(())
}

fn ingest_cmd(a: IngestArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let generations = read_generations(open(&a.generations)?, &path_str(&a.generations))?;
    let sources = LoadedSources::load(&a.sources)?;
    let mut run = ingest(&sources.inputs(), &manifest, &generations)?;
    run.manifest.inputs.extend(source_paths(&a.sources));
    run.manifest
        .inputs
        .insert("generations".into(), path_str(&a.generations));
    let mut out = Outputs::default();
    write_run(&mut out, &a.out, &run)?;
    out.commit()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).map_err(|e| {
        anyhow!(Error::Io {
            path: path.to_path_buf(),
            source: e
        })
    })?;
    Ok(BufReader::new(f))
}

#[derive(Serialize)]
struct ParsedRow<'a> {
    id: &'a str,
    labels: &'a [CpcCode],
    path: ParsePath,
    dropped: &'a [Dropped],
}

fn parse(a: ParseArgs) -> Result<()> {
    if a.cap == 0 {
        return Err(Error::Config("cap must be at least 1".into()).into());
    }
    let generations = read_generations(open(&a.raw)?, &path_str(&a.raw))?;
    let allowed = a.allowed.as_deref().map(load_allowed_sets).transpose()?;
    let outcomes = generations
        .par_iter()
        .map(|g| {
            let set = match &allowed {
                Some(sets) => {
                    Some(sets.get(&g.id).map(|s| s.truncated(a.k)).ok_or_else(|| {
                        Error::Alignment(format!("no allowed set for {:?}", g.id))
                    })?)
                }
                None => None,
            };
            let opts = ParseOptions {
                allowed: set.as_ref(),
                enforce_nonempty: a.nonempty,
                cap: a.cap,
            };
            Ok(parse_output(&g.raw_output, &opts))
        })
        .collect::<cpc_harness::Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    for (g, o) in generations.iter().zip(&outcomes) {
        let row = ParsedRow {
            id: &g.id,
            labels: &o.labels,
            path: o.path,
            dropped: &o.dropped,
        };
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    let mut out = Outputs::default();
    out.add(&a.out, buf);
    out.commit()
}

fn decode(a: DecodeArgs) -> Result<()> {
    let mut config = RunConfig::encoder(a.threshold, a.allowed.is_some());
    config.top_k = a.k;
    config.cap = a.cap;
    config.grid_step = a.grid_step;
    let mut manifest = RunManifest::new(run_id(&a.labels, &a.out), config)?;
    manifest.model = a.labels.model.clone();
    manifest.setting = a.labels.setting;
    manifest.inputs.insert("probs".into(), path_str(&a.probs));
    manifest.inputs.insert("test".into(), path_str(&a.test));
    let test = corpus(&a.test, &a.input, Split::Test)?;
    let probs = load_matrix(&a.probs)?;
    let dev = match (&a.dev, &a.dev_probs) {
        (Some(d), Some(p)) => {
            manifest.inputs.insert("dev".into(), path_str(d));
            manifest.inputs.insert("dev_probs".into(), path_str(p));
            Some((corpus(d, &a.input, Split::Validation)?, load_matrix(p)?))
        }
        _ => None,
    };
    let allowed = match &a.allowed {
        Some(p) => {
            manifest.inputs.insert("allowed".into(), path_str(p));
            Some(load_allowed_sets(p)?)
        }
        None => None,
    };
    let (run, calibration) = evaluation::run_encoder_pipeline(
        &manifest,
        &test,
        &probs,
        dev.as_ref().map(|(c, p)| (c, p)),
        allowed.as_ref(),
    )?;
    let mut out = Outputs::default();
    write_run(&mut out, &a.out, &run)?;
    if let Some(c) = calibration {
        out.add_json(a.out.join("calibration.json"), &c)?;
    }
    out.commit()
}

fn predictions_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PREDICTIONS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_rows(p: &Path) -> Result<Vec<evaluation::PredictionRow>> {
    let path = predictions_path(p);
    Ok(read_predictions(open(&path)?, &path_str(&path))?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let rows = load_rows(&a.predictions)?;
    let label_space = match &a.label_space {
        Some(p) => {
            let c = corpus(p, &a.input, Split::Train)?;
            Some(
                c.records()
                    .iter()
                    .flat_map(|r| r.gold_labels.iter().copied())
                    .collect(),
            )
        }
        None => None,
    };
    let options = MetricOptions {
        macro_universe: a.macro_universe.into(),
        label_space,
    };
    let evaluation = evaluate_rows(&rows, &options)?;
    let mut out = Outputs::default();
    add_metrics(&mut out, &a.out, &evaluation)?;
    out.commit()
}

fn compare(a: CompareArgs) -> Result<()> {
    let [lower, upper] = a.bands[..] else {
        bail!(Error::Config(format!(
            "--bands takes two values, got {}",
            a.bands.len()
        )));
    };
    let config = CompareConfig {
        lower,
        upper,
        alternatives: BTreeMap::from([
            (Band::Rare, a.rare.into()),
            (Band::Medium, a.medium.into()),
            (Band::Frequent, a.frequent.into()),
        ]),
        zero_mode: a.zero_mode.into(),
    };
    let report = compare_runs(&load_rows(&a.a)?, &load_rows(&a.b)?, &config)?;
    let mut out = Outputs::default();
    out.add_json(a.out.join("compare.json"), &report)?;
    out.add_with(a.out.join("delta.csv"), |w| report.delta.write_csv(w))?;
    out.add_with(a.out.join("delta_rolling.csv"), |w| {
        report.delta.write_rolling_csv(w)
    })?;
    out.commit()
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let [lo, hi] = a.levels[..] else {
        bail!(Error::Config(format!(
            "--levels takes two values, got {}",
            a.levels.len()
        )));
    };
    let rows = load_rows(&a.predictions)?;
    let evaluation = evaluate_rows(&rows, &MetricOptions::default())?;
    let config = BootstrapConfig {
        resamples: a.resamples,
        seed: a.seed,
        levels: (lo, hi),
        macro_universe: a.macro_universe.into(),
    };
    let metrics = match a.metric {
        MetricArg::Micro => vec![BootstrapMetric::MicroF1],
        MetricArg::Macro => vec![BootstrapMetric::MacroF1],
        MetricArg::Both => vec![BootstrapMetric::MicroF1, BootstrapMetric::MacroF1],
    };
    let results = metrics
        .into_iter()
        .map(|m| bootstrap_ci(evaluation.subclass_table(), m, &config))
        .collect::<cpc_harness::Result<Vec<_>>>()?;
    let mut out = Outputs::default();
    out.add_json(&a.out, &results)?;
    out.commit()
}

#[derive(serde::Deserialize)]
struct ScoreLine {
    model: String,
    setting: String,
    micro_f1: f64,
}

fn costs(a: CostsArgs) -> Result<()> {
    let records = load_costs(&a.costs)?;
    let mut metrics = Vec::new();
    for dir in &a.runs {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let (Some(model), Some(setting)) = (manifest.model.clone(), manifest.setting) else {
            bail!(Error::Config(format!(
                "{} has no model/setting labels",
                dir.display()
            )));
        };
        let rows = load_rows(dir)?;
        let report = evaluate_rows(&rows, &MetricOptions::default())?.report;
        metrics.push((RunKey { model, setting }, report.micro.f1));
    }
    if let Some(p) = &a.scores {
        let mut rdr = csv::Reader::from_reader(open(p)?);
        for (i, line) in rdr.deserialize::<ScoreLine>().enumerate() {
            let line = line.map_err(Error::from)?;
            let setting: Setting = line.setting.parse().map_err(|e: Error| {
                anyhow!(Error::Parse {
                    source_name: path_str(p),
                    line: i + 2,
                    message: e.to_string()
                })
            })?;
            metrics.push((
                RunKey {
                    model: line.model,
                    setting,
                },
                line.micro_f1,
            ));
        }
    }
    let table = tradeoff_table(&metrics, &records)?;
    for k in &table.unmatched_metrics {
        log::warn!("no inference cost record for {k}");
    }

    let mut per = csv::Writer::from_writer(Vec::new());
    per.write_record([
        "model",
        "setting",
        "n_patents",
        "s_per_patent",
        "wh_per_patent",
        "g_per_patent",
        "s_display",
        "wh_display",
        "g_display",
    ])?;
    for r in records.iter().filter(|r| r.stage == Stage::Inference) {
        let p = per_patent(r)?;
        per.write_record([
            r.model.clone(),
            r.setting.to_string(),
            r.n_patents.unwrap_or_default().to_string(),
            p.seconds.to_string(),
            p.wh.to_string(),
            p.grams.to_string(),
            format_quantity(p.seconds),
            format_quantity(p.wh),
            format_quantity(p.grams),
        ])?;
    }
    let mut out = Outputs::default();
    out.add(
        a.out.join("per_patent.csv"),
        per.into_inner().map_err(|e| anyhow!("{e}"))?,
    );
    out.add_with(a.out.join("tradeoff.csv"), |w| table.write_csv(w))?;
    out.add_json(a.out.join("tradeoff.json"), &table)?;
    out.add_json(a.out.join("tradeoff_plot.json"), &table.plot_data())?;
    out.commit()
}
