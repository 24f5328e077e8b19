use std::path::PathBuf;

use crate::graph::{EntityId, EntityKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // graph
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unknown entity id {id}")]
    DanglingEntity { file: String, line: usize, id: u64 },
    #[error(
        "{file}:{line}: edge must run symptom -> disease, found {head_kind:?} -> {tail_kind:?}"
    )]
    EdgeDirection {
        file: String,
        line: usize,
        head_kind: EntityKind,
        tail_kind: EntityKind,
    },
    #[error("{file}:{line}: duplicate triple ({head}, {relation}, {tail})")]
    DuplicateTriple {
        file: String,
        line: usize,
        head: u64,
        relation: String,
        tail: u64,
    },
    #[error("disease {0} has no symptoms")]
    IsolatedDisease(EntityId),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("entity {0} is not a symptom")]
    NotASymptom(EntityId),
    #[error("entity {0} is not a disease")]
    NotADisease(EntityId),
    #[error("traversal depth must be 1 or 2, got {0}")]
    InvalidDepth(usize),
    #[error("infeasible generator parameters: {0}")]
    Infeasible(String),
    #[error("no corruption exists for triple ({head}, {relation}, {tail})")]
    NoCorruption {
        head: EntityId,
        relation: usize,
        tail: EntityId,
    },

    // numerics
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("activation cache does not match this network (stale or foreign)")]
    StaleCache,
    #[error("function is not deterministic: f(p) gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    // training
    #[error("degenerate decision labels for {epochs} consecutive epochs (positive rate {positive_rate:.3})")]
    DegenerateLabels { epochs: usize, positive_rate: f64 },
    #[error("actor watchdog: mean return {mean_return:.3} after {episodes} episodes does not beat random baseline {baseline:.3}")]
    Watchdog {
        episodes: usize,
        mean_return: f64,
        baseline: f64,
    },
    #[error("replay buffer holds {len} transitions, needs {min_fill}")]
    BufferUnderfilled { len: usize, min_fill: usize },

    // environment / sessions
    #[error("episode already finished")]
    EpisodeDone,
    #[error("session {0} is concluded")]
    SessionConcluded(String),
    #[error("symptom {got} is not the pending question (pending: {pending:?})")]
    NotPending {
        got: EntityId,
        pending: Option<EntityId>,
    },
    #[error("invalid symptom id {0}")]
    InvalidSymptom(u64),
    #[error("a session needs at least one initial symptom")]
    NoInitialSymptoms,

    // persistence
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("model bundle is missing the {0} model")]
    MissingModel(&'static str),
    #[error("graph fingerprint mismatch: bundle {bundle}, graph {graph}")]
    FingerprintMismatch { bundle: String, graph: String },
    #[error("corrupt model file {path}: {message}")]
    CorruptModel { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
