use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("system {system} is degenerate: {detail}")]
    DegenerateSystem { system: usize, detail: String },

    /// A simulated state left the representable range. Explosive regimes are
    /// legal, silently propagating NaN is not.
    #[error("non-finite state at step {step}{}", fmt_system(.system))]
    Overflow { step: usize, system: Option<usize> },

    #[error("rank-deficient normal equations in {context}")]
    RankDeficient { context: String },

    /// The Jordan structure of a matrix was requested but cannot be computed
    /// reliably from floating-point data.
    #[error("Jordan structure unavailable{}: {detail}", fmt_system(.system))]
    JordanUnavailable { system: Option<usize>, detail: String },

    #[error("optimizer diverged at iteration {iter}")]
    Divergence { iter: usize },

    #[error("noise draws were not retained for this bundle")]
    NoiseUnavailable,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

fn fmt_system(system: &Option<usize>) -> String {
    match system {
        Some(m) => format!(" in system {m}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a system index to errors raised inside per-system loops.
    pub fn tag_system(self, m: usize) -> Self {
        match self {
            Error::Overflow { step, system: None } => Error::Overflow { step, system: Some(m) },
            Error::JordanUnavailable { system: None, detail } => {
                Error::JordanUnavailable { system: Some(m), detail }
            }
            other => other,
        }
    }
}
