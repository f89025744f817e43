use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum DucError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("corpus {path} contains no parseable records")]
    EmptyCorpus { path: PathBuf },

    #[error("invalid parameter `{field}`: {msg}")]
    Param { field: &'static str, msg: String },

    #[error("no source sample long enough for cell (N={n_start}, M={group_size})")]
    CellInfeasible { n_start: usize, group_size: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("input length {got} exceeds model max_seq {max}")]
    Overlong { got: usize, max: usize },

    #[error("training diverged (non-finite loss) at step {step}")]
    Training { step: usize },

    #[error("token `{token}` not in vocabulary")]
    OutOfVocab { token: String },

    #[error("bad weights container {path}: {msg}")]
    Weights { path: PathBuf, msg: String },

    #[error("stage `{stage}` failed: {msg}")]
    Stage { stage: String, msg: String },

    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },
}

pub type Result<T> = std::result::Result<T, DucError>;

impl DucError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DucError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn param(field: &'static str, msg: impl Into<String>) -> Self {
        DucError::Param {
            field,
            msg: msg.into(),
        }
    }
}
