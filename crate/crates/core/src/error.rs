//! Crate-wide error type.

use crate::{ClientId, ClusterId};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidDataset(String),

    #[error("batch size {batch} invalid for {samples} samples")]
    BatchSize { batch: usize, samples: usize },

    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),

    #[error("cannot evaluate on an empty test set")]
    EmptyTestSet,

    #[error("aggregation needs at least one update")]
    EmptyUpdateList,

    #[error("parameter length mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("malformed model encoding: {0}")]
    ModelEncoding(String),

    #[error("cosine similarity undefined for zero-norm update of client {0}")]
    ZeroUpdate(ClientId),

    #[error("cluster {0} has fewer than two members, nothing to bipartition")]
    SingletonCluster(ClusterId),

    #[error("unknown cluster id {0}")]
    UnknownCluster(ClusterId),

    #[error("updates do not cover the membership of cluster {0}")]
    IncompleteUpdates(ClusterId),

    #[error("children do not partition cluster {0}")]
    SplitPartition(ClusterId),

    #[error("non-finite model parameters in round {round}")]
    NonFinite { round: u32 },

    #[error("no client in the round has finite latency")]
    AllUnreachable,

    #[error("schedule is empty")]
    EmptySchedule,

    #[error("quantile must lie in [0, 1], got {0}")]
    InvalidQuantile(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
