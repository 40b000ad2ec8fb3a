use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate intensity range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("invalid resize target {0}x{1}")]
    InvalidTarget(usize, usize),
    #[error("epoch {epoch} outside [1, {epochs}]")]
    OutOfRange { epoch: usize, epochs: usize },
    #[error("invalid threshold {0}: must lie in (0, 1)")]
    InvalidThreshold(f64),
    #[error("mask has no foreground pixel")]
    EmptyForeground,
    #[error("invalid sigma {0}: must be >= 0")]
    InvalidSigma(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("attention channels do not sum to one (max deviation {0:e})")]
    SimplexViolation(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("supervision mask is not binary")]
    NotBinary,
    #[error("phantom does not fit the canvas: {0}")]
    SpecOutOfBounds(String),
    #[error("cannot read volume at {path}: {reason}")]
    UnreadableVolume { path: PathBuf, reason: String },
    #[error("unsupported modality {0:?}")]
    UnsupportedModality(String),
    #[error("value ranges differ: {0:?} vs {1:?}")]
    RangeMismatch((f64, f64), (f64, f64)),
    #[error("window {window} larger than image {h}x{w}")]
    WindowTooLarge { window: usize, h: usize, w: usize },
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("dataset is not paired")]
    UnpairedDataset,
    #[error("checkpoint config hash {found} does not match run config hash {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error("no checkpoint found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
