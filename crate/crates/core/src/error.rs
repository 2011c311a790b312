use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for dataset with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("requested {requested} samples but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("biased sampling needs {requested} eligible samples, only {eligible} agree with the probe")]
    NotEnoughEligible { requested: usize, eligible: usize },

    #[error("label {label} has {available} samples, fewer than k = {k}")]
    LabelTooSmall { label: i8, available: usize, k: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-numeric cell at row {row}, column '{column}': {value:?}")]
    NonNumericCell { row: usize, column: String, value: String },

    #[error("label column must hold exactly two distinct values, found {}: {values:?}", values.len())]
    LabelValues { values: Vec<String> },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("flat point, margin undefined")]
    FlatPoint,

    #[error("training diverged at batch {batch}: non-finite loss")]
    Diverged { batch: usize },

    #[error("non-finite loss for sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("{what} did not converge after {iterations} iterations (last = {last}, residual = {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last: f64,
        residual: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
