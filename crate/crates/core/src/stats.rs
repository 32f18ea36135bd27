//! Frequency bands, label-level bootstrap, paired Wilcoxon signed-rank tests
//! and the per-label F1 difference series.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{macro_labels, LabelConfusionTable, MacroUniverse, Prf};
use crate::taxonomy::Label;

/// Guards `ceil` against products like `0.2 * 10 = 2.0000000000000004`.
const CEIL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Rare,
    Medium,
    Frequent,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Rare, Band::Medium, Band::Frequent];

    pub fn name(self) -> &'static str {
        match self {
            Band::Rare => "rare",
            Band::Medium => "medium",
            Band::Frequent => "frequent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedLabels {
    pub lower: f64,
    pub upper: f64,
    /// Supports at or below this are rare; `None` when `lower` is 0.
    pub lower_threshold: Option<u64>,
    /// Supports at or above this are frequent; `None` when `upper` is 1.
    pub upper_threshold: Option<u64>,
    pub labels: BTreeMap<Label, (u64, Band)>,
}

impl StratifiedLabels {
    pub fn band(&self, label: &Label) -> Option<Band> {
        self.labels.get(label).map(|x| x.1)
    }

    pub fn members(&self, band: Band) -> impl Iterator<Item = &Label> {
        self.labels
            .iter()
            .filter(move |(_, v)| v.1 == band)
            .map(|(l, _)| l)
    }
}

/// Split labels into rare / medium / frequent by nearest-rank percentiles of
/// their supports. The frequent test runs first, so a label meeting both
/// thresholds is frequent.
pub fn stratify(
    supports: &BTreeMap<Label, u64>,
    lower: f64,
    upper: f64,
) -> Result<StratifiedLabels> {
    if !(0.0 <= lower && lower < upper && upper <= 1.0) {
        return Err(Error::Config(format!(
            "band bounds must satisfy 0 <= {lower} < {upper} <= 1"
        )));
    }
    if supports.is_empty() {
        return Err(Error::EmptyInput("label supports"));
    }
    let mut sorted: Vec<u64> = supports.values().copied().collect();
    sorted.sort_unstable();
    let n = sorted.len();
    let lower_rank = (lower * n as f64 - CEIL_EPS).ceil().max(0.0) as usize;
    let upper_from_top = ((1.0 - upper) * n as f64 - CEIL_EPS).ceil().max(0.0) as usize;
    let lower_threshold = lower_rank.checked_sub(1).map(|i| sorted[i.min(n - 1)]);
    let upper_threshold = (upper_from_top > 0).then(|| sorted[n - upper_from_top.min(n)]);

    let labels = supports
        .iter()
        .map(|(&label, &s)| {
            let band = if upper_threshold.is_some_and(|t| s >= t) {
                Band::Frequent
            } else if lower_threshold.is_some_and(|t| s <= t) {
                Band::Rare
            } else {
                Band::Medium
            };
            (label, (s, band))
        })
        .collect();
    Ok(StratifiedLabels {
        lower,
        upper,
        lower_threshold,
        upper_threshold,
        labels,
    })
}

/// SplitMix64: 64-bit state, one stream, fully specified by its constants.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const NAME: &'static str = "splitmix64";

    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform index in `0..m` by multiply-shift.
    pub fn index(&mut self, m: usize) -> usize {
        ((u128::from(self.next_u64()) * m as u128) >> 64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMetric {
    MicroF1,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub levels: (f64, f64),
    pub macro_universe: MacroUniverse,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: 0,
            levels: (0.025, 0.975),
            macro_universe: MacroUniverse::GoldSupported,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: BootstrapMetric,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub seed: u64,
    pub levels: (f64, f64),
    pub rng: String,
}

/// Linear interpolation between order statistics (the common "type 7"
/// definition). `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Index plan for `resamples` draws of `m` items, generated in one fixed
/// sequential order so evaluation can run in parallel.
pub fn resample_plan(m: usize, resamples: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = SplitMix64::new(seed);
    (0..resamples)
        .map(|_| (0..m).map(|_| rng.index(m) as u32).collect())
        .collect()
}

type Statistic = Box<dyn Fn(&[u32]) -> f64 + Sync>;

/// Resample labels (table rows) with replacement and report a percentile CI.
///
/// Micro-F1 pools the counts of the drawn rows; macro-F1 averages the drawn
/// per-label F1 values over the configured universe.
pub fn bootstrap_ci(
    table: &LabelConfusionTable,
    metric: BootstrapMetric,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.resamples == 0 {
        return Err(Error::Config(
            "at least one bootstrap resample is required".into(),
        ));
    }
    let (lo, hi) = config.levels;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("invalid CI levels ({lo}, {hi})")));
    }
    let stat: Statistic = match metric {
        BootstrapMetric::MicroF1 => {
            let rows: Vec<(u64, u64, u64)> =
                table.rows.iter().map(|r| (r.tp, r.fp, r.fn_)).collect();
            Box::new(move |idx: &[u32]| {
                let (tp, fp, fn_) = idx.iter().fold((0, 0, 0), |a, &i| {
                    let r = rows[i as usize];
                    (a.0 + r.0, a.1 + r.1, a.2 + r.2)
                });
                Prf::from_counts(tp, fp, fn_).f1
            })
        }
        BootstrapMetric::MacroF1 => {
            let f1s: Vec<f64> = macro_labels(table, config.macro_universe)
                .map(|r| r.prf().f1)
                .collect();
            Box::new(move |idx: &[u32]| {
                idx.iter().map(|&i| f1s[i as usize]).sum::<f64>() / idx.len() as f64
            })
        }
    };
    let m = match metric {
        BootstrapMetric::MicroF1 => table.rows.len(),
        BootstrapMetric::MacroF1 => macro_labels(table, config.macro_universe).count(),
    };
    if m == 0 {
        return Err(Error::EmptyInput("confusion table"));
    }
    let all: Vec<u32> = (0..m as u32).collect();
    let point = stat(&all);
    let plan = resample_plan(m, config.resamples, config.seed);
    let mut values: Vec<f64> = plan.par_iter().map(|idx| stat(idx)).collect();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        metric,
        point,
        lower: percentile(&values, lo),
        upper: percentile(&values, hi),
        resamples: config.resamples,
        seed: config.seed,
        levels: config.levels,
        rng: SplitMix64::NAME.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// First sample tends to be larger.
    Greater,
    Less,
    TwoSided,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMode {
    /// Drop zero differences before ranking.
    #[default]
    Wilcox,
    /// Rank zeros with the rest, then leave their ranks out of both sums.
    Pratt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// Pairs entering the statistic (nonzero differences).
    pub n: usize,
    pub zeros: usize,
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub method: TestMethod,
    pub zero_mode: ZeroMode,
}

/// Average ranks (1-based) of `values`, plus the size of every tie group.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        groups.push(j - i + 1);
        i = j + 1;
    }
    (ranks, groups)
}

/// `counts[w]` = number of sign assignments of ranks `1..=n` whose positive
/// ranks sum to `w`.
pub fn signed_rank_counts(n: usize) -> Vec<u64> {
    let total = n * (n + 1) / 2;
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for r in 1..=n {
        for w in (r..=total).rev() {
            counts[w] += counts[w - r];
        }
    }
    counts
}

const EXACT_MAX_N: usize = 25;

/// Paired Wilcoxon signed-rank test on `a − b`.
pub fn wilcoxon(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    zero_mode: ZeroMode,
) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("paired samples"));
    }
    let all: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let zeros = all.iter().filter(|d| **d == 0.0).count();
    if zeros == all.len() {
        return Err(Error::AllZeroDifferences);
    }
    let ranked: Vec<f64> = match zero_mode {
        ZeroMode::Wilcox => all.iter().copied().filter(|d| *d != 0.0).collect(),
        ZeroMode::Pratt => all.clone(),
    };
    let (ranks, _) = average_ranks(&ranked.iter().map(|d| d.abs()).collect::<Vec<_>>());
    // zeros carry no sign, so their tie group never enters the variance
    let (_, groups) = average_ranks(
        &all.iter()
            .filter(|d| **d != 0.0)
            .map(|d| d.abs())
            .collect::<Vec<_>>(),
    );
    let w_plus: f64 = ranked
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_minus: f64 = ranked
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d < 0.0)
        .map(|(_, r)| r)
        .sum();
    let n_nonzero = all.len() - zeros;
    let ties = groups.iter().any(|&g| g > 1);
    let zeros_ranked = zero_mode == ZeroMode::Pratt && zeros > 0;

    let (p_value, method) = if n_nonzero <= EXACT_MAX_N && !ties && !zeros_ranked {
        let counts = signed_rank_counts(n_nonzero);
        let total = 2f64.powi(n_nonzero as i32);
        // without ties every rank is an integer
        let upper_tail = |w: f64| counts[w.round() as usize..].iter().sum::<u64>() as f64 / total;
        let greater = upper_tail(w_plus);
        let less = upper_tail(w_minus);
        let p = match alternative {
            Alternative::Greater => greater,
            Alternative::Less => less,
            Alternative::TwoSided => (2.0 * greater.min(less)).min(1.0),
        };
        (p, TestMethod::Exact)
    } else {
        let n = ranked.len() as f64;
        let z0 = if zero_mode == ZeroMode::Pratt {
            zeros as f64
        } else {
            0.0
        };
        let mean = (n * (n + 1.0) - z0 * (z0 + 1.0)) / 4.0;
        let tie_term: f64 = groups.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1.0) * (2.0 * n + 1.0) - z0 * (z0 + 1.0) * (2.0 * z0 + 1.0)) / 24.0
            - tie_term;
        if var <= 0.0 {
            return Err(Error::DegenerateVariance);
        }
        let sd = var.sqrt();
        let normal = Normal::standard();
        let upper_tail = |w: f64| normal.sf((w - mean - 0.5) / sd);
        let greater = upper_tail(w_plus);
        let less = upper_tail(w_minus);
        let p = match alternative {
            Alternative::Greater => greater,
            Alternative::Less => less,
            Alternative::TwoSided => (2.0 * greater.min(less)).min(1.0),
        };
        (p.clamp(0.0, 1.0), TestMethod::NormalApprox)
    };
    Ok(PairedTestResult {
        n: n_nonzero,
        zeros,
        statistic: w_plus,
        p_value,
        alternative,
        method,
        zero_mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub label: Label,
    pub support: u64,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingPoint {
    pub start: usize,
    pub end: usize,
    pub mean_support: f64,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSeries {
    pub points: Vec<DeltaPoint>,
    pub window: usize,
    pub rolling: Vec<RollingPoint>,
}

impl DeltaSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "support", "f1_a", "f1_b", "delta"])?;
        for p in &self.points {
            w.write_record([
                p.label.to_string(),
                p.support.to_string(),
                p.a.to_string(),
                p.b.to_string(),
                p.delta.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }

    pub fn write_rolling_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["start", "end", "mean_support", "mean_delta"])?;
        for p in &self.rolling {
            w.write_record([
                p.start.to_string(),
                p.end.to_string(),
                p.mean_support.to_string(),
                p.mean_delta.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<output>", e))
    }
}

/// Smoothing window: 5 labels or 5% of them, whichever is larger.
pub fn rolling_window(n: usize) -> usize {
    5usize.max((0.05 * n as f64 - CEIL_EPS).ceil() as usize)
}

/// Per-label `a − b`, ordered by ascending support then label, with a
/// trailing rolling mean (complete windows only; one point when the
/// window is longer than the series).
pub fn delta_series(
    a: &BTreeMap<Label, f64>,
    b: &BTreeMap<Label, f64>,
    supports: &BTreeMap<Label, u64>,
) -> Result<DeltaSeries> {
    let keys_a: BTreeSet<&Label> = a.keys().collect();
    if keys_a != b.keys().collect::<BTreeSet<_>>() {
        return Err(Error::Alignment(
            "per-label scores cover different labels".into(),
        ));
    }
    let mut points = a
        .iter()
        .map(|(label, &fa)| {
            let support = *supports
                .get(label)
                .ok_or_else(|| Error::Alignment(format!("no support for {label}")))?;
            Ok(DeltaPoint {
                label: *label,
                support,
                a: fa,
                b: b[label],
                delta: fa - b[label],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|x, y| x.support.cmp(&y.support).then(x.label.cmp(&y.label)));

    let n = points.len();
    let window = rolling_window(n);
    let mean_over = |s: usize, e: usize| RollingPoint {
        start: s,
        end: e,
        mean_support: points[s..e].iter().map(|p| p.support as f64).sum::<f64>() / (e - s) as f64,
        mean_delta: points[s..e].iter().map(|p| p.delta).sum::<f64>() / (e - s) as f64,
    };
    let rolling = if n == 0 {
        Vec::new()
    } else if window >= n {
        vec![mean_over(0, n)]
    } else {
        (0..=n - window).map(|s| mean_over(s, s + window)).collect()
    };
    Ok(DeltaSeries {
        points,
        window,
        rolling,
    })
}

/// Per-label F1 for the labels of `table` inside `universe`.
pub fn per_label_f1(table: &LabelConfusionTable, universe: MacroUniverse) -> BTreeMap<Label, f64> {
    macro_labels(table, universe)
        .map(|r| (r.label, r.prf().f1))
        .collect()
}
