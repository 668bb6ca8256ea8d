use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Diff(#[from] diffmath::DiffError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("map: {0}")]
    Map(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint: {last_good:?}")]
    Diverged { epoch: usize, last_good: Option<PathBuf> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
