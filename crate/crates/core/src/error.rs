use std::path::PathBuf;

use crate::tables::EntityRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A record the text-model gateway could not normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordFailure {
    pub entity: EntityRef,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Csv {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("need >=2 tables, found {found}")]
    NeedTwoTables { found: usize },

    #[error("ground-truth clusters overlap at {entity}")]
    OverlappingTruth { entity: EntityRef },

    #[error("{entity} does not refer to an existing record")]
    UnknownEntity { entity: EntityRef },

    #[error("unknown table id {0}")]
    UnknownTable(u32),

    #[error("row index {row} out of range for table with {len} rows")]
    RowOutOfRange { row: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unresolved placeholder {{{0}}} in prompt template")]
    UnresolvedPlaceholder(String),

    #[error("text-model request failed after {attempts} attempt(s): {message}")]
    Gateway { attempts: u32, message: String },

    #[error("coordination aborted: {} record(s) failed, first: {}", failures.len(), failures.first().map(|f| format!("{} ({})", f.entity, f.reason)).unwrap_or_default())]
    Coordination { failures: Vec<RecordFailure> },

    #[error("embedding service failed after {attempts} attempt(s){}: {message}", entity.map(|e| format!(" at {e}")).unwrap_or_default())]
    Embedding {
        attempts: u32,
        entity: Option<EntityRef>,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("no ground-truth clusters to evaluate against")]
    EmptyTruth,

    #[error("entity {entity} is not a member of the cluster")]
    NotInCluster { entity: EntityRef },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
