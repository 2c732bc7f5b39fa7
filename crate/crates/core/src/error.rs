use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("invalid mask split: {visible} visible / {masked} masked of {total}")]
    DegenerateSplit {
        visible: usize,
        masked: usize,
        total: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),
    #[error("too few tracts in region ({0} < 2)")]
    TooFewTracts(usize),
    #[error("point outside world extent: {0}")]
    OutsideExtent(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bad magic in {0}")]
    Magic(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("config hash mismatch: checkpoint {checkpoint:016x}, current {current:016x}")]
    ConfigHash { checkpoint: u64, current: u64 },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
