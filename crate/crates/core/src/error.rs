use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum LpplsError {
    /// An argument outside the domain of a power/log evaluation, e.g. `t >= t_c`.
    #[error("domain error: {0}")]
    Domain(String),

    /// The 4x4 normal system is numerically singular.
    #[error("singular linear system (condition number {cond:.3e})")]
    SingularSystem { cond: f64 },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    /// The curve is flat and cannot be min-max scaled.
    #[error("degenerate value range: cannot min-max scale a flat curve")]
    DegenerateRange,

    #[error("all {starts} multi-starts failed: {last}")]
    AllStartsFailed { starts: usize, last: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Configuration violation. `path` is a JSON pointer into the config document.
    #[error("invalid config at {path}: {reason}")]
    InvalidConfig { path: String, reason: String },

    #[error("unsupported or corrupted header: {0}")]
    Version(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dates are not strictly increasing at line {line}")]
    NonMonotoneDates { line: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LpplsError {
    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        LpplsError::InvalidConfig {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Prefix the JSON pointer of a config error; other errors pass through.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            LpplsError::InvalidConfig { path, reason } => LpplsError::InvalidConfig {
                path: format!("{prefix}{path}"),
                reason,
            },
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, LpplsError>;
