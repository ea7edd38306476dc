use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("morphology field `{field}` = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid morphology: {0}")]
    InvalidMorphology(String),

    #[error("terrain level {0} outside 1..=10")]
    InvalidLevel(u32),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("simulation fault at t = {time:.3} s: {reason}")]
    SimulationFault { time: f64, reason: String },

    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Plot(#[from] PlotError),
}

#[derive(Debug, Error)]
#[error("plot: {0}")]
pub struct PlotError(pub String);

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
