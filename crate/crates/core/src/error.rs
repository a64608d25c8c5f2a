use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("cannot step below timestep 0")]
    TimestepUnderflow,

    #[error("previous timestep {prev} must be strictly smaller than current timestep {current}")]
    TimestepOrdering { prev: usize, current: usize },

    #[error("mask dimension {dim} is not divisible by latent stride {stride}")]
    Indivisible { dim: usize, stride: usize },

    #[error("task mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("spatial grids are misaligned: {0}")]
    GridMisaligned(String),

    #[error("non-finite loss at step {step} (timesteps {timesteps:?}, sources {sources:?})")]
    NonFiniteLoss {
        step: u64,
        timesteps: Vec<usize>,
        sources: Vec<String>,
    },

    #[error("AUC is undefined when the ground truth holds a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("need at least 2 base images, got {0}")]
    InsufficientBases(usize),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
