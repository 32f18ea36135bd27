mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpc_harness::corpus::{CorpusFormat, Split};
use cpc_harness::costs::Setting;
use cpc_harness::decoding::DEFAULT_GRID_STEP;
use cpc_harness::metrics::MacroUniverse;
use cpc_harness::prompting::Regime;
use cpc_harness::stats::{Alternative, ZeroMode};
use cpc_harness::PREDICTION_CAP;

/// Evaluation harness for hierarchical multi-label CPC patent classification.
///
/// Exit codes: 0 success, 2 input or parse error, 3 configuration mismatch,
/// 4 internal invariant breach.
#[derive(Parser, Debug)]
#[command(name = "cpc-harness", version)]
pub struct Cli {
    /// TOML config file; its `[<subcommand>]` table supplies flag values, explicit flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Subclass frequencies, coverage curve and labels-per-patent statistics
    Stats(StatsArgs),
    /// Top-K allowed subclasses per patent from definition embeddings
    Retrieve(RetrieveArgs),
    /// Render prompts for a prompted run and write its manifest
    Prompt(PromptArgs),
    /// Turn external generations into a scored run directory
    Ingest(IngestArgs),
    /// Parse raw generations into label lists
    Parse(ParseArgs),
    /// Threshold encoder probabilities into a scored run directory
    Decode(DecodeArgs),
    /// Recompute metrics and per-label tables from predictions.jsonl
    Evaluate(EvaluateArgs),
    /// Paired per-subclass comparison of two runs, stratified by support
    Compare(CompareArgs),
    /// Percentile bootstrap confidence intervals for micro/macro F1
    Bootstrap(BootstrapArgs),
    /// Per-patent costs and the accuracy-energy trade-off table
    Costs(CostsArgs),
}

fn core_value<T>(s: &str) -> Result<T, String>
where
    T: FromStr<Err = cpc_harness::Error>,
{
    s.parse().map_err(|e: cpc_harness::Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
pub struct CorpusInput {
    /// Corpus file schema [default: from extension, .csv or JSONL]
    #[arg(long, value_parser = core_value::<CorpusFormat>, value_name = "jsonl|csv")]
    pub input_format: Option<CorpusFormat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Patent corpus (JSONL or CSV)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split tag recorded for the corpus
    #[arg(long, default_value = "train", value_parser = core_value::<Split>)]
    pub split: Split,
    /// Second split for the log-frequency correlation
    #[arg(long)]
    pub compare_with: Option<PathBuf>,
    #[command(flatten)]
    pub input: CorpusInput,
    /// csv: counts/coverage/histogram CSVs plus summary.json; json: one stats.json
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    pub format: OutFormat,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Subclass definition embeddings (JSONL {"code","vector"} or dim= binary)
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Patent query vectors keyed by patent id, same formats
    #[arg(long)]
    pub queries: PathBuf,
    /// Allowed codes per patent
    #[arg(long, default_value_t = cpc_harness::retrieval::DEFAULT_TOP_K)]
    pub k: usize,
    /// Allowed-sets JSONL output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct RunLabels {
    /// Run identifier stored in the manifest [default: output directory name]
    #[arg(long)]
    pub run_id: Option<String>,
    /// Model label used to join with cost records
    #[arg(long)]
    pub model: Option<String>,
    /// Setting label used to join with cost records, e.g. "Zero-shot + RAG"
    #[arg(long, value_parser = core_value::<Setting>)]
    pub setting: Option<Setting>,
}

#[derive(Args, Debug, Clone)]
pub struct LlmSources {
    /// Test corpus
    #[arg(long)]
    pub test: PathBuf,
    /// Training corpus (few-shot example pool)
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Subclass definitions, one CODE<TAB>definition per line (RAG regimes)
    #[arg(long)]
    pub definitions: Option<PathBuf>,
    /// Allowed-sets JSONL from `retrieve` (RAG regimes)
    #[arg(long)]
    pub allowed: Option<PathBuf>,
    #[command(flatten)]
    pub input: CorpusInput,
}

#[derive(Args, Debug)]
pub struct PromptArgs {
    /// zero_shot, few_shot, zero_shot_rag or few_shot_rag
    #[arg(long, value_parser = core_value::<Regime>)]
    pub regime: Regime,
    #[command(flatten)]
    pub sources: LlmSources,
    /// Allowed codes kept per patent
    #[arg(long, default_value_t = cpc_harness::retrieval::DEFAULT_TOP_K)]
    pub k: usize,
    /// Training-row indices used as static few-shot examples
    #[arg(long = "static", value_delimiter = ',', default_value = "2,27")]
    pub static_indices: Vec<usize>,
    /// TF-IDF nearest training examples added per patent
    #[arg(long, default_value_t = 3)]
    pub dynamic: usize,
    /// Maximum labels kept per patent
    #[arg(long, default_value_t = PREDICTION_CAP)]
    pub cap: usize,
    /// Let parsed outputs stay empty instead of falling back to a single code
    #[arg(long)]
    pub allow_empty: bool,
    #[command(flatten)]
    pub labels: RunLabels,
    /// Output directory (prompts.jsonl, manifest.json)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// manifest.json written by `prompt`
    #[arg(long)]
    pub manifest: PathBuf,
    /// Generations JSONL {"id","raw_output"[,"manifest_digest"]}
    #[arg(long)]
    pub generations: PathBuf,
    #[command(flatten)]
    pub sources: LlmSources,
    /// Run directory output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParseArgs {
    /// Generations JSONL {"id","raw_output"}
    #[arg(long)]
    pub raw: PathBuf,
    /// Allowed-sets JSONL; codes outside a patent's set are dropped
    #[arg(long)]
    pub allowed: Option<PathBuf>,
    /// Allowed codes kept per patent
    #[arg(long, default_value_t = cpc_harness::retrieval::DEFAULT_TOP_K)]
    pub k: usize,
    /// Never return an empty label list (token scan, then top-1 allowed code)
    #[arg(long)]
    pub nonempty: bool,
    /// Maximum labels kept per patent
    #[arg(long, default_value_t = PREDICTION_CAP)]
    pub cap: usize,
    /// Parsed JSONL output {"id","labels","path","dropped"}
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Test probabilities (CSV id,<code>... or JSONL {"id","probs"})
    #[arg(long)]
    pub probs: PathBuf,
    /// Test corpus with gold labels
    #[arg(long)]
    pub test: PathBuf,
    /// Decision threshold; omit to calibrate on --dev/--dev-probs
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Development probabilities for calibration
    #[arg(long, requires = "dev")]
    pub dev_probs: Option<PathBuf>,
    /// Development corpus for calibration
    #[arg(long, requires = "dev_probs")]
    pub dev: Option<PathBuf>,
    /// Allowed-sets JSONL; restricts decoding to each patent's set
    #[arg(long)]
    pub allowed: Option<PathBuf>,
    /// Allowed codes kept per patent
    #[arg(long, default_value_t = cpc_harness::retrieval::DEFAULT_TOP_K)]
    pub k: usize,
    /// Maximum labels per patent
    #[arg(long, default_value_t = PREDICTION_CAP)]
    pub cap: usize,
    /// Calibration grid step
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    pub grid_step: f64,
    #[command(flatten)]
    pub input: CorpusInput,
    #[command(flatten)]
    pub labels: RunLabels,
    /// Run directory output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UniverseArg {
    /// Labels with gold support
    Gold,
    /// Every label in the table, including --label-space
    Full,
}

impl From<UniverseArg> for MacroUniverse {
    fn from(u: UniverseArg) -> Self {
        match u {
            UniverseArg::Gold => MacroUniverse::GoldSupported,
            UniverseArg::Full => MacroUniverse::FullLabelSpace,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// predictions.jsonl, or a run directory containing it
    #[arg(long)]
    pub predictions: PathBuf,
    /// Labels the macro average runs over
    #[arg(long, value_enum, default_value_t = UniverseArg::Gold)]
    pub macro_universe: UniverseArg,
    /// Corpus whose gold labels extend the label space (e.g. training split)
    #[arg(long)]
    pub label_space: Option<PathBuf>,
    #[command(flatten)]
    pub input: CorpusInput,
    /// Output directory (metrics.json, per_label_*.csv)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlternativeArg {
    Greater,
    Less,
    TwoSided,
}

impl From<AlternativeArg> for Alternative {
    fn from(a: AlternativeArg) -> Self {
        match a {
            AlternativeArg::Greater => Alternative::Greater,
            AlternativeArg::Less => Alternative::Less,
            AlternativeArg::TwoSided => Alternative::TwoSided,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ZeroModeArg {
    Wilcox,
    Pratt,
}

impl From<ZeroModeArg> for ZeroMode {
    fn from(z: ZeroModeArg) -> Self {
        match z {
            ZeroModeArg::Wilcox => ZeroMode::Wilcox,
            ZeroModeArg::Pratt => ZeroMode::Pratt,
        }
    }
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Run A (predictions.jsonl or run directory)
    #[arg(long)]
    pub a: PathBuf,
    /// Run B (predictions.jsonl or run directory)
    #[arg(long)]
    pub b: PathBuf,
    /// Lower and upper support quantiles separating rare/medium/frequent
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "0.2,0.8")]
    pub bands: Vec<f64>,
    /// Alternative for the rare band (A versus B)
    #[arg(long, value_enum, default_value_t = AlternativeArg::Greater)]
    pub rare: AlternativeArg,
    /// Alternative for the medium band
    #[arg(long, value_enum, default_value_t = AlternativeArg::TwoSided)]
    pub medium: AlternativeArg,
    /// Alternative for the frequent band
    #[arg(long, value_enum, default_value_t = AlternativeArg::Less)]
    pub frequent: AlternativeArg,
    /// Treatment of zero differences
    #[arg(long, value_enum, default_value_t = ZeroModeArg::Wilcox)]
    pub zero_mode: ZeroModeArg,
    /// Output directory (compare.json, delta.csv, delta_rolling.csv)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Micro,
    Macro,
    Both,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    /// predictions.jsonl, or a run directory containing it
    #[arg(long)]
    pub predictions: PathBuf,
    /// Number of resamples
    #[arg(long, short = 'B', default_value_t = 1000)]
    pub resamples: usize,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Statistic(s) to bootstrap
    #[arg(long, value_enum, default_value_t = MetricArg::Both)]
    pub metric: MetricArg,
    /// Lower and upper percentile levels
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 1,
        default_value = "0.025,0.975"
    )]
    pub levels: Vec<f64>,
    /// Labels the macro average runs over
    #[arg(long, value_enum, default_value_t = UniverseArg::Gold)]
    pub macro_universe: UniverseArg,
    /// JSON output
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CostsArgs {
    /// Costs CSV: stage,setting,model,time_min,energy_kwh,co2_kg,n_patents
    #[arg(long)]
    pub costs: PathBuf,
    /// Run directories whose manifest names model and setting
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// CSV model,setting,micro_f1 with scores of runs not available locally
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output directory (per_patent.csv, tradeoff.csv, tradeoff.json, tradeoff_plot.json)
    #[arg(long)]
    pub out: PathBuf,
}

/// Error chain joined by ": ", skipping causes already spelled out by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<cpc_harness::Error>())
                .map_or(2, cpc_harness::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
