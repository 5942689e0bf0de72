use thiserror::Error;

/// Errors surfaced by the library API.
#[derive(Debug, Error)]
pub enum TclError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty interaction log: {0}")]
    EmptyLog(String),

    #[error("split produces an empty {which} set ({n_events} events, fractions {fractions})")]
    EmptySplit {
        which: &'static str,
        n_events: usize,
        fractions: String,
    },

    #[error("invalid split fractions {0}: must lie in (0,1) and sum to 1")]
    BadSplit(String),

    #[error("logs do not share a vocabulary")]
    VocabMismatch,

    #[error("out-of-order timestamp {t} appended after {last}")]
    OutOfOrder { t: f64, last: f64 },

    #[error("unknown node id `{0}`")]
    UnknownId(String),

    #[error("vocabulary too small: need {need} negative candidates, have {have}")]
    VocabTooSmall { need: usize, have: usize },

    #[error("checkpoint tensor `{name}`: shape mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint vocabulary does not match the data ({0})")]
    CheckpointVocab(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("optimizer step with empty gradients")]
    EmptyGrads,

    #[error("true target `{0}` is absent from the candidate set")]
    TargetNotCandidate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TclError>;
