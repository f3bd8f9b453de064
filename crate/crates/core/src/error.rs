use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the aggregation library and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("incompatible nested rates: coarse {coarse} + nested {nested} vs fine {fine}")]
    IncompatibleRates { coarse: u32, nested: u32, fine: u32 },

    #[error("codeword size must be even and non-zero, got {0}")]
    OddCodewordSize(usize),

    #[error("lattice index {index} out of range for codeword of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("privacy budget must be positive, got {0}")]
    InvalidEpsilon(f64),

    #[error("randomized-response probability must lie in (1/2, 1], got {0}")]
    InvalidProbability(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("messages from mixed rounds: {0} and {1}")]
    MixedRounds(u32, u32),

    #[error("codeword does not belong to user {user}")]
    CodewordMismatch { user: u32 },

    #[error("malformed bit message: {0}")]
    Wire(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("IDX file {path} is truncated: needed {needed} bytes, found {found}")]
    IdxTruncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("partition needs {needed} samples without replacement but dataset has {available}")]
    PartitionExhausted { needed: usize, available: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from a bad configuration rather than the environment.
    pub fn is_config(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
