use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiwrError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("too few points: got {got}, need at least {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("degenerate extent: all points coincide")]
    DegenerateExtent,
    #[error("singular query: query lies within {threshold:e} of point {index}")]
    SingularQuery { index: usize, threshold: f64 },
    #[error("stale winding tree: tree generation {tree}, cloud generation {cloud}")]
    StaleTree { tree: u64, cloud: u64 },
    #[error("high-confidence set is empty")]
    EmptyHighConfidenceSet,
    #[error("mask selects no points")]
    EmptyMask,
    #[error("no point satisfies the confidence threshold")]
    EmptyResult,
    #[error("no grid cell straddles the iso value {iso}")]
    EmptyLevelSet { iso: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("interior outliers need an inside oracle")]
    NoInsideOracle,
    #[error("non-finite energy at iteration {iteration} ({stage})")]
    NonFiniteEnergy { iteration: usize, stage: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiwrError>;
