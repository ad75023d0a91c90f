use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: normalized axis is empty")]
    EmptyAxis(&'static str),

    #[error("{0}: every position in a row is masked")]
    DegenerateRow(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frame of {height}x{width} does not fit into {target}x{target}")]
    FrameTooLarge {
        height: usize,
        width: usize,
        target: usize,
    },

    #[error("sequence of {len} frames exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sample rejected: {0}")]
    SampleRejected(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("format error in {path} at offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("frame blob truncated for video {id}: need {needed} bytes at offset {offset}, blob has {available}")]
    TruncatedBlob {
        id: String,
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("image import failed for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
