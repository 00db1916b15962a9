use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::{AccessKind, ObjectId, RaceDetail, Target, ThreadId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("access kind {access:?} cannot target {target}")]
    InvalidCombination { access: AccessKind, target: Target },
    #[error("malformed visible operation `{0}`")]
    MalformedOp(String),
    #[error("invalid backtrack point: {0}")]
    InvalidPoint(&'static str),
    #[error("invalid race detail {0:?}")]
    InvalidRaceDetail(RaceDetail),
    #[error("unknown violation kind `{0}`")]
    UnknownKind(String),
}

/// Misuse of the shadow API by a program under test.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShadowError {
    #[error("shadow primitive used outside a checked execution")]
    NoExecution,
    #[error("object handle {0} is not registered in this execution")]
    Unregistered(u64),
    #[error("object {0} is not a {1}")]
    WrongKind(ObjectId, &'static str),
    #[error("thread {0} already holds mutex {1}")]
    Relock(ThreadId, ObjectId),
    #[error("thread {0} does not hold mutex {1}")]
    NotHolder(ThreadId, ObjectId),
    #[error("thread {0} cannot join itself")]
    JoinSelf(ThreadId),
    #[error("thread {0} was never spawned")]
    UnknownThread(ThreadId),
    #[error("checker stopped")]
    CheckerStopped,
    #[error("program failed: {0}")]
    Program(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("handle {0} is already registered")]
    Duplicate(u64),
    #[error("handle {0} is not registered")]
    Unknown(u64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("protocol violation by thread {tid}: {what}")]
    Protocol { tid: ThreadId, what: &'static str },
    #[error("replay diverged at step {step}: thread {tid} is not enabled")]
    ReplayDivergence { step: usize, tid: ThreadId },
    #[error("bound estimate needs at least one partition count")]
    EmptyPartitions,
    #[error("partition counts must be at least 1")]
    ZeroPartition,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RaceError {
    #[error("object {0} has no race worker")]
    UnknownObject(ObjectId),
    #[error("completion on object {0} without a matching pending access")]
    Underflow(ObjectId),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Failures of the wire/record codec and the node transport.
#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("malformed record on line {line}: {reason}")]
    Codec { line: usize, reason: String },
    #[error("node {node}: {source}")]
    Connection {
        node: u32,
        #[source]
        source: io::Error,
    },
    #[error("node {node}: unexpected message `{message}`")]
    Unexpected { node: u32, message: String },
    #[error("node {node} failed: {reason}")]
    Worker { node: u32, reason: String },
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("thread {tid}: {source}")]
    Program {
        tid: ThreadId,
        #[source]
        source: ShadowError,
    },
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Race(#[from] RaceError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("backtrack store is corrupted: {0}")]
    CorruptStore(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CheckError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CheckError::Io {
            path: path.into(),
            source,
        }
    }
}
