use crate::config::SCHEMA_VERSION;
use crate::ingest::IngestError;
use magcal_core::baselines::BaselineError;
use magcal_core::eval::{DeltaError, EvalError};
use magcal_core::solver::SolverError;
use serde_json::json;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(IngestError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    Study(EvalError),
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::FileNotFound(p) => CliError::FileNotFound(p),
            other => CliError::Ingest(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidStudy(m) => CliError::InvalidConfig(m),
            other => CliError::Study(other),
        }
    }
}

impl CliError {
    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::NotFound => CliError::FileNotFound(path.to_path_buf()),
            _ => CliError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            },
        }
    }

    /// 1 for numerical failures, 2 for I/O and validation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(SolverError::InvalidConfig(_)) => 2,
            CliError::Baseline(BaselineError::InvalidFilter(_) | BaselineError::InvalidInput(_)) => 2,
            CliError::Solver(_) | CliError::Baseline(_) | CliError::Delta(_) => 1,
            CliError::Study(EvalError::LengthMismatch { .. }) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::FileNotFound(_) => "FileNotFound",
            CliError::Io { .. } => "IoError",
            CliError::Ingest(IngestError::ParseError { .. }) => "ParseError",
            CliError::Ingest(IngestError::SchemaError(_)) => "SchemaError",
            CliError::Ingest(IngestError::MonotonicityError { .. }) => "MonotonicityError",
            CliError::Ingest(IngestError::JitterError { .. }) => "JitterError",
            CliError::Ingest(_) => "IngestError",
            CliError::InvalidConfig(_) => "InvalidConfig",
            CliError::Solver(SolverError::NormalEquationsSingular { .. }) => "NormalEquationsSingular",
            CliError::Solver(_) => "SolverError",
            CliError::Baseline(BaselineError::IllConditioned { .. }) => "IllConditioned",
            CliError::Baseline(BaselineError::RankDeficient { .. }) => "RankDeficient",
            CliError::Baseline(_) => "BaselineError",
            CliError::Delta(_) => "DeltaError",
            CliError::Study(_) => "StudyError",
        }
    }

    /// Machine-readable error document.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "schema-version": SCHEMA_VERSION,
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit-code": self.exit_code(),
            }
        })
    }
}
