use std::path::PathBuf;

use hamf_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid scenario '{id}': {msg}")]
    InvalidScenario { id: String, msg: String },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported schema version '{found}' (expected '{expected}')")]
    Version { found: String, expected: &'static str },
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (scenarios: {scenario_ids:?})")]
    NonFiniteLoss { epoch: usize, batch: usize, scenario_ids: Vec<String> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }

    pub(crate) fn scenario(id: &str, msg: impl Into<String>) -> Self {
        CoreError::InvalidScenario { id: id.to_string(), msg: msg.into() }
    }
}

/// Converts a serde_json error position (1-based line/column) into a byte offset of `text`.
pub(crate) fn json_error(text: &str, err: &serde_json::Error) -> CoreError {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == err.line() {
            offset += err.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len();
    }
    CoreError::Parse { offset: offset.min(text.len()), msg: err.to_string() }
}
