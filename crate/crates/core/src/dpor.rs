//! Dependence between visible operations and backtrack-set computation.
//!
//! Two operations are dependent when they touch the same object and at least
//! one of them writes. Synchronisation primitives announce their operations as
//! writes on their own object, so contention on a lock or semaphore is
//! dependent as well.

use std::collections::BTreeSet;

use crate::model::{AccessKind, Target, ThreadId, VisibleOp};

pub fn dependent(a: &VisibleOp, b: &VisibleOp) -> bool {
    match (a.target(), b.target()) {
        (Target::Object(x), Target::Object(y)) if x == y => {
            a.access() == AccessKind::Write || b.access() == AccessKind::Write
        }
        _ => false,
    }
}

/// One executed step: who ran, what it announced, and who could have run
/// instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedStep {
    pub tid: ThreadId,
    pub op: VisibleOp,
    pub enabled: BTreeSet<ThreadId>,
}

/// The executed steps of the current execution, indexed by depth.
#[derive(Debug, Clone, Default)]
pub struct ExecutionLog {
    steps: Vec<LoggedStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthOutOfRange(pub usize);

impl ExecutionLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a step and returns its depth.
    pub fn push(&mut self, step: LoggedStep) -> usize {
        self.steps.push(step);
        self.steps.len() - 1
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn get(&self, depth: usize) -> Option<&LoggedStep> {
        self.steps.get(depth)
    }

    pub fn steps(&self) -> &[LoggedStep] {
        &self.steps
    }

    pub fn schedule(&self) -> Vec<ThreadId> {
        self.steps.iter().map(|s| s.tid).collect()
    }
}

/// Was `tid` enabled in the state at `depth`?
pub fn co_enabled(
    log: &ExecutionLog,
    depth: usize,
    tid: ThreadId,
) -> Result<bool, DepthOutOfRange> {
    log.get(depth)
        .map(|step| step.enabled.contains(&tid))
        .ok_or(DepthOutOfRange(depth))
}

/// Backtrack additions caused by the step at `depth`.
///
/// Looks for the latest earlier step by another thread that is dependent with
/// this one and at which this thread was already enabled, and asks for this
/// thread to be tried there first. Nothing is added when no such step exists.
pub fn on_execute(log: &ExecutionLog, depth: usize) -> Vec<(usize, ThreadId)> {
    let Some(step) = log.get(depth) else {
        return Vec::new();
    };
    last_dependent_addition(log, depth, step.tid, &step.op)
        .into_iter()
        .collect()
}

/// Same rule for an operation that is announced but never executed, e.g. the
/// blocked requests left over when an execution deadlocks.
pub fn on_pending(log: &ExecutionLog, tid: ThreadId, op: &VisibleOp) -> Vec<(usize, ThreadId)> {
    last_dependent_addition(log, log.len(), tid, op)
        .into_iter()
        .collect()
}

fn last_dependent_addition(
    log: &ExecutionLog,
    before: usize,
    tid: ThreadId,
    op: &VisibleOp,
) -> Option<(usize, ThreadId)> {
    log.steps[..before]
        .iter()
        .enumerate()
        .rev()
        .find(|(_, earlier)| {
            earlier.tid != tid && dependent(&earlier.op, op) && earlier.enabled.contains(&tid)
        })
        .map(|(j, _)| (j, tid))
}

/// Do at least two of these enabled operations, from different threads,
/// depend on each other?
pub fn is_backtrack_point(ops: &[VisibleOp]) -> bool {
    ops.iter().enumerate().any(|(i, a)| {
        ops[i + 1..]
            .iter()
            .any(|b| a.tid() != b.tid() && dependent(a, b))
    })
}
