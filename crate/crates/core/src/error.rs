use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("tensor `{name}`: shape holds {expected} values, got {actual}")]
    ShapeMismatch { name: String, expected: usize, actual: usize },
    #[error("tensor `{name}`: zero-sized dimension")]
    ZeroDim { name: String },
    #[error("tensor `{name}`: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input has {actual} features, model expects {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("sample target does not fit a {0} model")]
    TargetMismatch(&'static str),
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("need at least {needed} records, have {actual}")]
    TooFewRecords { needed: usize, actual: usize },
    #[error("{clients} clients requested for {records} records")]
    TooManyClients { clients: usize, records: usize },
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("unknown record id `{0}`")]
    UnknownId(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("invalid box in record `{id}`: {reason}")]
    InvalidBox { id: String, reason: String },
    #[error("{}:{line}: {reason}", file.display())]
    Parse { file: PathBuf, line: usize, reason: String },
    #[error("missing label file {}", .0.display())]
    MissingLabel(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty shard")]
    EmptyShard,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("duplicate update from client {0}")]
    DuplicateClient(usize),
    #[error("client {client} outside 0..{expected}")]
    UnknownClient { client: usize, expected: usize },
    #[error("total sample count is zero")]
    ZeroSamples,
    #[error("update from client {client} has zero samples")]
    EmptyUpdate { client: usize },
    #[error("received {received} of {expected} client updates")]
    MissingClients { expected: usize, received: usize },
    #[error("round state is stopped")]
    Stopped,
    #[error("no completed rounds")]
    NoRounds,
    #[error("expected {expected} client shards, got {actual}")]
    ShardCount { expected: usize, actual: usize },
    #[error("client {client} failed: {source}")]
    ClientFailed {
        client: usize,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("checksum mismatch")]
    BadCrc,
    #[error("truncated input")]
    Truncated,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for client {0}")]
    Timeout(usize),
    #[error("peer disconnected")]
    Disconnected,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// Top-level error for orchestration paths that touch several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
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
