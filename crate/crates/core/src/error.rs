use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pedigree: {0}")]
    InvalidPedigree(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical underflow: {what} (tail mass {mass:.3e})")]
    Underflow { what: String, mass: f64 },

    #[error("rank deficiency: collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("perfect separation on covariate `{column}`")]
    Separation { column: String },

    #[error("no convergence after {iterations} iterations ({detail}); best residual {best_residual:.3e}")]
    NonConvergence {
        iterations: usize,
        best_residual: f64,
        detail: String,
    },

    #[error("inference unreliable: {failures} of {total} refits failed")]
    InferenceUnreliable {
        failures: usize,
        total: usize,
        partial: Box<crate::inference::BootstrapReport>,
    },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPedigree(_) => "invalid_pedigree",
            Error::Domain(_) => "domain",
            Error::Dimension(_) => "dimension",
            Error::Underflow { .. } => "underflow",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Separation { .. } => "separation",
            Error::NonConvergence { .. } => "non_convergence",
            Error::InferenceUnreliable { .. } => "inference_unreliable",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
