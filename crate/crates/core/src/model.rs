//! Domain types shared by every part of the checker.
//!
//! Everything here is a plain value: identities, the announced-operation
//! tuple, traces, backtrack points and violation reports.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::ModelError;

/// Identity of a program thread, assigned densely in creation order.
///
/// The main thread is always `ThreadId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadId(pub u32);

impl ThreadId {
    pub const MAIN: ThreadId = ThreadId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of a registered shared object, assigned densely in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u32);

impl ObjectId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Whether an announced operation can fail to progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    NonBlocking,
    Waiting,
}

impl Token {
    pub fn wire(self) -> &'static str {
        match self {
            Token::NonBlocking => "n",
            Token::Waiting => "y",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    DontCare,
}

impl AccessKind {
    pub fn wire(self) -> &'static str {
        match self {
            AccessKind::Read => "r",
            AccessKind::Write => "w",
            AccessKind::DontCare => "dc",
        }
    }
}

/// Target of a visible operation. `DontCare` is a real position in the tuple,
/// never an absent field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Object(ObjectId),
    DontCare,
}

impl Target {
    pub fn object(self) -> Option<ObjectId> {
        match self {
            Target::Object(oid) => Some(oid),
            Target::DontCare => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Object(oid) => write!(f, "{oid}"),
            Target::DontCare => f.write_str("dc"),
        }
    }
}

/// The `{Token, Tid, Op, Oid}` announcement a thread makes before each
/// scheduling point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VisibleOp {
    token: Token,
    tid: ThreadId,
    access: AccessKind,
    target: Target,
}

impl VisibleOp {
    pub fn token(&self) -> Token {
        self.token
    }

    pub fn tid(&self) -> ThreadId {
        self.tid
    }

    pub fn access(&self) -> AccessKind {
        self.access
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn is_waiting(&self) -> bool {
        self.token == Token::Waiting
    }
}

/// Builds a validated [`VisibleOp`].
///
/// A `DontCare` access must pair with a `DontCare` target and a real access
/// must name an object.
pub fn make_visible_op(
    token: Token,
    tid: ThreadId,
    access: AccessKind,
    target: Target,
) -> Result<VisibleOp, ModelError> {
    let consistent = matches!(
        (access, target),
        (AccessKind::DontCare, Target::DontCare)
            | (AccessKind::Read | AccessKind::Write, Target::Object(_))
    );
    if !consistent {
        return Err(ModelError::InvalidCombination { access, target });
    }
    Ok(VisibleOp {
        token,
        tid,
        access,
        target,
    })
}

impl fmt::Display for VisibleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{{},{},{},{}}}",
            self.token.wire(),
            self.tid,
            self.access.wire(),
            self.target
        )
    }
}

impl FromStr for VisibleOp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::MalformedOp(s.to_string());
        let inner = s
            .trim()
            .strip_prefix('{')
            .and_then(|rest| rest.strip_suffix('}'))
            .ok_or_else(bad)?;
        let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
        let [token, tid, access, target] = fields.as_slice() else {
            return Err(bad());
        };
        let token = match *token {
            "n" => Token::NonBlocking,
            "y" => Token::Waiting,
            _ => return Err(bad()),
        };
        let tid = ThreadId(tid.parse().map_err(|_| bad())?);
        let access = match *access {
            "r" => AccessKind::Read,
            "w" => AccessKind::Write,
            "dc" => AccessKind::DontCare,
            _ => return Err(bad()),
        };
        let target = match *target {
            "dc" => Target::DontCare,
            n => Target::Object(ObjectId(n.parse().map_err(|_| bad())?)),
        };
        make_visible_op(token, tid, access, target)
    }
}

/// The ordered thread choices of one execution.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Trace {
    pub steps: Vec<ThreadId>,
    pub iteration: u64,
}

impl Trace {
    pub fn new(steps: Vec<ThreadId>, iteration: u64) -> Self {
        Trace { steps, iteration }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A state on some recorded execution that still has unexplored successors.
///
/// The state itself is never captured: it is identified by the schedule
/// prefix that reaches it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BacktrackPoint {
    pub depth: usize,
    pub prefix: Vec<ThreadId>,
    pub pending: BTreeSet<ThreadId>,
    pub done: BTreeSet<ThreadId>,
    pub discovery_iteration: u64,
}

impl BacktrackPoint {
    pub fn new(prefix: Vec<ThreadId>, discovery_iteration: u64) -> Self {
        BacktrackPoint {
            depth: prefix.len(),
            prefix,
            pending: BTreeSet::new(),
            done: BTreeSet::new(),
            discovery_iteration,
        }
    }

    pub fn key(&self) -> PointKey {
        PointKey::of_prefix(&self.prefix)
    }

    /// Checks the structural invariants of a stored point.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth != self.prefix.len() {
            return Err(ModelError::InvalidPoint(
                "depth does not match prefix length",
            ));
        }
        if self.pending.is_empty() {
            return Err(ModelError::InvalidPoint("pending set is empty"));
        }
        if !self.pending.is_disjoint(&self.done) {
            return Err(ModelError::InvalidPoint("pending and done overlap"));
        }
        Ok(())
    }
}

/// Store key of a backtrack point: hash of the prefix plus its depth.
///
/// The hash is FNV-1a over the tids so it is stable across processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointKey {
    pub depth: usize,
    pub prefix_hash: u64,
}

impl PointKey {
    pub fn of_prefix(prefix: &[ThreadId]) -> Self {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for tid in prefix {
            for byte in tid.0.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        PointKey {
            depth: prefix.len(),
            prefix_hash: hash,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    Deadlock,
    Livelock,
    DataRace,
}

impl ViolationKind {
    pub fn label(self) -> &'static str {
        match self {
            ViolationKind::Deadlock => "deadlock",
            ViolationKind::Livelock => "livelock",
            ViolationKind::DataRace => "data-race",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ViolationKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deadlock" => Ok(ViolationKind::Deadlock),
            "livelock" => Ok(ViolationKind::Livelock),
            "data-race" => Ok(ViolationKind::DataRace),
            other => Err(ModelError::UnknownKind(other.to_string())),
        }
    }
}

/// Counter snapshot of the object a race was reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RaceDetail {
    pub object: ObjectId,
    pub readers_pending: u32,
    pub writers_pending: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ViolationReport {
    kind: ViolationKind,
    iteration: u64,
    trace: Trace,
    race_detail: Option<RaceDetail>,
}

impl ViolationReport {
    pub fn deadlock(trace: Trace) -> Self {
        ViolationReport {
            kind: ViolationKind::Deadlock,
            iteration: trace.iteration,
            trace,
            race_detail: None,
        }
    }

    pub fn livelock(trace: Trace) -> Self {
        ViolationReport {
            kind: ViolationKind::Livelock,
            iteration: trace.iteration,
            trace,
            race_detail: None,
        }
    }

    /// A race report needs at least one pending writer and two pending
    /// accesses in total.
    pub fn data_race(trace: Trace, detail: RaceDetail) -> Result<Self, ModelError> {
        if detail.writers_pending < 1 || detail.readers_pending + detail.writers_pending < 2 {
            return Err(ModelError::InvalidRaceDetail(detail));
        }
        Ok(ViolationReport {
            kind: ViolationKind::DataRace,
            iteration: trace.iteration,
            trace,
            race_detail: Some(detail),
        })
    }

    pub fn kind(&self) -> ViolationKind {
        self.kind
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn race_detail(&self) -> Option<RaceDetail> {
        self.race_detail
    }
}
