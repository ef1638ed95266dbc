use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: every position of a reduced slice is masked")]
    AllMasked { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty inventory: no sememe reaches min_count {0}")]
    EmptyInventory(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("cannot split {entries} entries into {parts} non-empty parts")]
    TooFewEntries { entries: usize, parts: usize },

    #[error("no embeddable tokens for `{0}`")]
    NoEmbeddableTokens(String),

    #[error("token `{0}` has no embedding")]
    MissingEmbedding(String),

    #[error("empty gold set for `{0}`")]
    EmptyGold(String),

    #[error("no correspondence matrix for mode {0}")]
    NoCorrespondence(String),

    #[error("invalid mode `{0}`")]
    InvalidMode(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Shape { .. } => "shape",
            Error::AllMasked { .. } => "all_masked",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptyInventory(_) => "empty_inventory",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::TooFewEntries { .. } => "too_few_entries",
            Error::NoEmbeddableTokens(_) => "no_embeddable_tokens",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::EmptyGold(_) => "empty_gold",
            Error::NoCorrespondence(_) => "no_correspondence",
            Error::InvalidMode(_) => "invalid_mode",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}
