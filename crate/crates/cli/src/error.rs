use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] coherit::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::File { .. } => "io",
            CliError::Core(e) => e.kind(),
        }
    }

    /// Process exit status; one value per failure class.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 3,
            "schema" | "csv" | "json" => 4,
            "io" => 5,
            "invalid_pedigree" => 6,
            "domain" | "dimension" => 7,
            "rank_deficient" | "separation" => 8,
            "underflow" => 9,
            "non_convergence" => 10,
            "inference_unreliable" => 11,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
    }
}
