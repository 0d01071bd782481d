use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("step size {h:e} fell below the floor {floor:e} at t = {t}")]
    StepSizeUnderflow { t: f64, h: f64, floor: f64 },

    #[error("history lookup at t = {t} outside covered range [{start}, {end}]")]
    OutOfHistory { t: f64, start: f64, end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("delay {delay} is not an integer multiple of dt = {dt}")]
    DelayNotAligned { delay: f64, dt: f64 },

    #[error("unsupported solver: {0}")]
    UnsupportedSolver(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },

    #[error("not a delay model: causality labels carry no lags")]
    NotDelayModel,

    #[error("Lorenz-96 needs at least 4 series, got {0}")]
    TooFewSeries(usize),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
