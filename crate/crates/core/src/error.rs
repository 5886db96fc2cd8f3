use std::path::PathBuf;

use statskernel::KernelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("data: {0}")]
    Data(String),
    /// Convergence failure; carries the offending parameters with their R̂.
    #[error("R̂ above {threshold} for: {}", format_offenders(.offenders))]
    Convergence {
        threshold: f64,
        offenders: Vec<(String, f64)>,
    },
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("stale input {path}: {reason}")]
    StaleInput { path: PathBuf, reason: String },
    #[error("optimizer did not converge: {0}")]
    Optimizer(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_offenders(offenders: &[(String, f64)]) -> String {
    offenders
        .iter()
        .map(|(n, r)| format!("{n}={r:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Convergence { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
