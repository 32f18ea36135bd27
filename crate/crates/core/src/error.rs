use std::path::PathBuf;

use thiserror::Error;

use crate::taxonomy::CpcCode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong inside the harness.
///
/// Variants are grouped by the exit code the CLI maps them to, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid CPC code {raw:?}")]
    InvalidCode { raw: String },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("duplicate CPC code {0}")]
    DuplicateCode(CpcCode),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("corpus has no usable records ({} rejected: {})", rejected.len(), preview(rejected))]
    EmptyCorpus { rejected: Vec<String> },

    #[error("no term reaches the minimum document frequency")]
    EmptyVocabulary,

    #[error("dimension mismatch for {key:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        key: String,
        expected: usize,
        found: usize,
    },

    #[error("zero vector for {key:?}")]
    ZeroVector { key: String },

    #[error("index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("missing prompt component: {0}")]
    MissingComponent(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("label {0} is outside the label universe")]
    UnknownLabel(String),

    #[error("record {id:?} has no predicted labels")]
    EmptyPrediction { id: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("all paired differences are zero; no test possible")]
    AllZeroDifferences,

    #[error("a transformed frequency series has zero variance")]
    DegenerateVariance,

    #[error("{source_name}:{line}: negative {field} ({value})")]
    NegativeQuantity {
        source_name: String,
        line: usize,
        field: &'static str,
        value: f64,
    },

    #[error("per-patent quantities only exist for inference records")]
    WrongStage,

    #[error("duplicate join key {0}")]
    DuplicateKey(String),

    #[error("no generation for {} test ids ({})", .0.len(), preview(.0))]
    MissingGeneration(Vec<String>),

    #[error("manifest digest mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("runs were evaluated on different gold sets: {0}")]
    GoldMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 5;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}

impl Error {
    pub(crate) fn parse(
        source_name: impl Into<String>,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for bad input, 3 for configuration mismatches,
    /// 4 for internal invariant breaches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigMismatch { .. } | Error::Config(_) | Error::GoldMismatch(_) => 3,
            Error::Invariant(_) => 4,
            _ => 2,
        }
    }
}
