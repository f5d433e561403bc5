use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("malformed delay layout at step {t}, codebook {q} (1-based): {reason}")]
    MalformedLayout { t: usize, q: usize, reason: &'static str },

    #[error("malformed unified sequence: {0}")]
    MalformedSequence(String),

    #[error("frame tuple {0:?} is not produced by any motif")]
    Inversion(Vec<u32>),

    #[error("world construction failed: {0}")]
    Construction(String),

    #[error("record {id} has framed length {len}, above max_batch_bin {cap}")]
    OversizeRecord { id: String, len: usize, cap: usize },

    #[error("non-finite loss at step {step}, batch {batch}: {detail}")]
    NonFiniteLoss {
        step: u64,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
