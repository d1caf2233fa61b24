use serde_json::{json, Value};
use thiserror::Error;

/// Failure of a CLI command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or usage (exit 2).
    #[error("{0}")]
    Config(String),

    /// Numeric failure in the library (exit 3, or 4 for non-convergence).
    #[error("{source}")]
    Numeric {
        job: Option<String>,
        #[source]
        source: orbstab::Error,
    },

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn numeric(job: &str, source: orbstab::Error) -> Self {
        match source {
            orbstab::Error::UnknownSystem(name) => CliError::Config(format!("unknown system {name:?}")),
            orbstab::Error::InvalidInput(msg) => CliError::Config(msg),
            source => CliError::Numeric {
                job: (!job.is_empty()).then(|| job.to_string()),
                source,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric {
                source: orbstab::Error::NotConverged { .. },
                ..
            } => 4,
            CliError::Numeric { .. } | CliError::Io(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::Numeric { source, .. } => source.kind(),
            CliError::Io(_) => "io",
        }
    }

    /// Machine-readable error document written to stderr.
    pub fn to_json(&self) -> Value {
        let mut doc = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Numeric { job, source } = self {
            if let Some(job) = job {
                doc["job"] = json!(job);
            }
            match source {
                orbstab::Error::NotConverged { sweeps, gap } => {
                    doc["periodicity_gap"] = json!(gap);
                    doc["sweeps"] = json!(sweeps);
                }
                orbstab::Error::LeftTube { time, .. } => doc["time"] = json!(time),
                _ => {}
            }
        }
        doc
    }
}
