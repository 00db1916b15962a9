//! Fair, non-preemptive scheduling decisions.
//!
//! The scheduler only sees messages: announcements, pass/yield results of
//! waiting operations, thread creation and thread end. A permit, once
//! granted, is given back only at the holder's next announcement, yield or
//! exit.
//!
//! Free picks use priorities. Every thread starts at 0. A yield drops the
//! yielder below the current minimum, and progress (a pass or a completed
//! non-blocking step) restores it to 0. A yielded thread is not retried until
//! some step has made progress. Among equal priorities the lowest tid wins,
//! except that a thread left waiting while enabled for as many steps as there
//! are live threads is picked first.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use crate::error::SchedulerError;
use crate::model::{ThreadId, Trace, VisibleOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    /// Running its current partition, or waiting to run a non-blocking op.
    Runnable,
    /// Announced a waiting op that has not been attempted since the last progress.
    PendingWaiting,
    /// Its last attempt failed and nothing has progressed since.
    Yielded,
    Ended,
}

#[derive(Debug, Clone)]
pub struct ThreadStatus {
    pub state: ThreadState,
    pub pending_op: Option<VisibleOp>,
    pub priority: i64,
    pub yields_since_progress: u32,
    /// Consecutive progress steps this thread spent enabled but not picked.
    pub waited: u32,
}

impl ThreadStatus {
    fn new() -> Self {
        ThreadStatus {
            state: ThreadState::Runnable,
            pending_op: None,
            priority: 0,
            yields_since_progress: 0,
            waited: 0,
        }
    }

    fn is_live(&self) -> bool {
        self.state != ThreadState::Ended
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickMode {
    Free,
    Replay,
    Force,
}

impl fmt::Display for PickMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PickMode::Free => "free",
            PickMode::Replay => "replay",
            PickMode::Force => "force",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptResult {
    Progress,
    Yield,
}

/// One scheduling decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionRecord {
    pub step: usize,
    pub pick: ThreadId,
    pub mode: PickMode,
    pub result: Option<AttemptResult>,
    pub enabled: BTreeSet<ThreadId>,
}

impl fmt::Display for DecisionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} pick={} mode={}",
            self.step, self.pick, self.mode
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Grant { tid: ThreadId, mode: PickMode },
    NormalEnd,
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IterationOutcome {
    NormalEnd,
    Deadlock(Trace),
    LivelockCandidate(Trace),
    BoundWarning(Trace),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundCheck {
    Continue,
    Exceeded,
}

pub fn check_bound(steps_executed: usize, bound: usize) -> BoundCheck {
    if steps_executed > bound {
        BoundCheck::Exceeded
    } else {
        BoundCheck::Continue
    }
}

/// Expected number of steps of a terminating execution: one step per
/// partition of every thread.
pub fn estimate_bound(partitions: &[u32]) -> Result<u64, SchedulerError> {
    if partitions.is_empty() {
        return Err(SchedulerError::EmptyPartitions);
    }
    if partitions.contains(&0) {
        return Err(SchedulerError::ZeroPartition);
    }
    Ok(partitions.iter().map(|&p| u64::from(p)).sum())
}

/// Scheduling steps before a bound trip that are inspected to tell a fair
/// cycle from starvation.
pub fn fairness_window(live_threads: usize) -> usize {
    2 * live_threads
}

/// Classifies an execution that ran past its bound.
///
/// `steps` holds, per progress step, the thread that ran and the threads that
/// were enabled. Within the trailing window every thread that was enabled at
/// some point must also have run; otherwise somebody was starved and the
/// overrun is only a warning.
pub fn classify_overrun(
    steps: &[(ThreadId, &BTreeSet<ThreadId>)],
    live_threads: usize,
    trace: Trace,
) -> IterationOutcome {
    let window = fairness_window(live_threads).min(steps.len());
    let tail = &steps[steps.len() - window..];
    let picked: BTreeSet<ThreadId> = tail.iter().map(|(tid, _)| *tid).collect();
    let starved = tail
        .iter()
        .flat_map(|(_, enabled)| enabled.iter())
        .any(|tid| !picked.contains(tid));
    if window == 0 || starved {
        IterationOutcome::BoundWarning(trace)
    } else {
        IterationOutcome::LivelockCandidate(trace)
    }
}

#[derive(Debug, Clone, Copy)]
struct PlannedPick {
    tid: ThreadId,
    mode: PickMode,
}

#[derive(Debug, Default)]
pub struct Scheduler {
    threads: Vec<ThreadStatus>,
    permit: Option<ThreadId>,
    plan: VecDeque<PlannedPick>,
    current: Option<DecisionRecord>,
    steps: usize,
    decisions: Vec<DecisionRecord>,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedules `prefix` in replay mode, then `force` (if any), then free picks.
    pub fn with_plan(prefix: &[ThreadId], force: Option<ThreadId>) -> Self {
        let mut plan: VecDeque<PlannedPick> = prefix
            .iter()
            .map(|&tid| PlannedPick {
                tid,
                mode: PickMode::Replay,
            })
            .collect();
        if let Some(tid) = force {
            plan.push_back(PlannedPick {
                tid,
                mode: PickMode::Force,
            });
        }
        Scheduler {
            plan,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn permit(&self) -> Option<ThreadId> {
        self.permit
    }

    pub fn status(&self, tid: ThreadId) -> Option<&ThreadStatus> {
        self.threads.get(tid.index())
    }

    pub fn live_threads(&self) -> usize {
        self.threads.iter().filter(|t| t.is_live()).count()
    }

    pub fn live_tids(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_live())
            .map(|(i, _)| ThreadId(i as u32))
    }

    /// True while replayed or forced picks remain.
    pub fn is_planned(&self) -> bool {
        !self.plan.is_empty()
    }

    /// Registers a thread. The first one is the main thread, which starts
    /// out holding the permit.
    pub fn on_created(&mut self, tid: ThreadId) -> Result<(), SchedulerError> {
        if tid.index() == 0 && self.threads.is_empty() {
            self.permit = Some(tid);
        }
        if tid.index() != self.threads.len() {
            return Err(SchedulerError::Protocol {
                tid,
                what: "thread ids must be registered densely",
            });
        }
        self.threads.push(ThreadStatus::new());
        Ok(())
    }

    fn thread_mut(&mut self, tid: ThreadId) -> Result<&mut ThreadStatus, SchedulerError> {
        self.threads
            .get_mut(tid.index())
            .ok_or(SchedulerError::Protocol {
                tid,
                what: "unknown thread",
            })
    }

    /// A thread announced its next visible operation.
    ///
    /// For the permit holder this ends its current partition.
    pub fn on_announce(&mut self, op: VisibleOp) -> Result<(), SchedulerError> {
        let tid = op.tid();
        let holder = self.permit == Some(tid);
        let status = self.thread_mut(tid)?;
        if status.state == ThreadState::Ended {
            return Err(SchedulerError::Protocol {
                tid,
                what: "announce after end",
            });
        }
        if status.pending_op.is_some() && !holder {
            return Err(SchedulerError::Protocol {
                tid,
                what: "announce while an operation is already pending",
            });
        }
        status.pending_op = Some(op);
        status.state = if op.is_waiting() {
            ThreadState::PendingWaiting
        } else {
            ThreadState::Runnable
        };
        if holder {
            self.permit = None;
            self.finish_non_blocking(tid);
        }
        Ok(())
    }

    fn finish_non_blocking(&mut self, tid: ThreadId) {
        if let Some(record) = &self.current {
            if record.pick == tid && record.result.is_none() {
                self.progress(tid);
            }
        }
    }

    pub fn on_pass(&mut self, tid: ThreadId) -> Result<(), SchedulerError> {
        self.require_waiting_holder(tid, "pass")?;
        self.progress(tid);
        Ok(())
    }

    pub fn on_yield(&mut self, tid: ThreadId) -> Result<(), SchedulerError> {
        self.require_waiting_holder(tid, "yield")?;
        let floor = self
            .threads
            .iter()
            .filter(|t| t.is_live())
            .map(|t| t.priority)
            .min()
            .unwrap_or(0);
        let status = self.thread_mut(tid)?;
        status.state = ThreadState::Yielded;
        status.priority = floor - 1;
        status.yields_since_progress += 1;
        self.permit = None;
        if let Some(mut record) = self.current.take() {
            record.result = Some(AttemptResult::Yield);
            self.decisions.push(record);
        }
        Ok(())
    }

    pub fn on_end(&mut self, tid: ThreadId) -> Result<(), SchedulerError> {
        let holder = self.permit == Some(tid);
        let status = self.thread_mut(tid)?;
        if status.state == ThreadState::Ended {
            return Err(SchedulerError::Protocol {
                tid,
                what: "thread ended twice",
            });
        }
        if status.pending_op.is_some() && !holder {
            return Err(SchedulerError::Protocol {
                tid,
                what: "end while an operation is pending",
            });
        }
        status.state = ThreadState::Ended;
        status.pending_op = None;
        if holder {
            self.permit = None;
            self.finish_non_blocking(tid);
        }
        Ok(())
    }

    fn require_waiting_holder(
        &self,
        tid: ThreadId,
        what: &'static str,
    ) -> Result<(), SchedulerError> {
        let waiting = self
            .status(tid)
            .and_then(|s| s.pending_op)
            .is_some_and(|op| op.is_waiting());
        if self.permit != Some(tid) || !waiting {
            return Err(SchedulerError::Protocol {
                tid,
                what: match what {
                    "pass" => "pass without a permit for a waiting op",
                    _ => "yield without a permit for a waiting op",
                },
            });
        }
        Ok(())
    }

    /// Bookkeeping for a step that made progress.
    fn progress(&mut self, tid: ThreadId) {
        let Some(mut record) = self.current.take() else {
            return;
        };
        record.result = Some(AttemptResult::Progress);
        for (i, status) in self.threads.iter_mut().enumerate() {
            let this = ThreadId(i as u32);
            if this == tid {
                status.priority = 0;
                status.yields_since_progress = 0;
                status.waited = 0;
            } else if record.enabled.contains(&this) {
                status.waited += 1;
            } else {
                status.waited = 0;
            }
            if status.state == ThreadState::Yielded {
                status.state = ThreadState::PendingWaiting;
            }
        }
        if let Some(status) = self.threads.get_mut(tid.index()) {
            if status.state != ThreadState::Ended && self.permit == Some(tid) {
                // a passed waiting op keeps running until its next announce
                status.pending_op = None;
                status.state = ThreadState::Runnable;
            }
        }
        self.steps += 1;
        self.decisions.push(record);
    }

    /// Threads that could make progress right now.
    ///
    /// Non-blocking announcements are always enabled; waiting ones are
    /// enabled when `ready` says their attempt would succeed.
    pub fn enabled(&self, ready: &dyn Fn(ThreadId) -> bool) -> BTreeSet<ThreadId> {
        self.threads
            .iter()
            .enumerate()
            .filter_map(|(i, status)| {
                let tid = ThreadId(i as u32);
                let op = status.pending_op?;
                let on = match status.state {
                    ThreadState::Ended => false,
                    ThreadState::Yielded => false,
                    _ => !op.is_waiting() || ready(tid),
                };
                on.then_some(tid)
            })
            .collect()
    }

    fn candidates(&self) -> Vec<ThreadId> {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.pending_op.is_some()
                    && matches!(s.state, ThreadState::Runnable | ThreadState::PendingWaiting)
            })
            .map(|(i, _)| ThreadId(i as u32))
            .collect()
    }

    /// Chooses who runs next.
    ///
    /// `ready` reports whether a waiting op would succeed now; it is used for
    /// the enabled snapshot and to validate replayed and forced picks.
    pub fn pick_next(
        &mut self,
        ready: &dyn Fn(ThreadId) -> bool,
    ) -> Result<Decision, SchedulerError> {
        if let Some(holder) = self.permit {
            return Err(SchedulerError::Protocol {
                tid: holder,
                what: "pick requested while a permit is outstanding",
            });
        }
        if self.live_threads() == 0 {
            if let Some(planned) = self.plan.front() {
                return Err(SchedulerError::ReplayDivergence {
                    step: self.steps + 1,
                    tid: planned.tid,
                });
            }
            return Ok(Decision::NormalEnd);
        }
        let enabled = self.enabled(ready);
        let (tid, mode) = match self.plan.pop_front() {
            Some(planned) => {
                if !enabled.contains(&planned.tid) && !self.may_attempt(planned) {
                    return Err(SchedulerError::ReplayDivergence {
                        step: self.steps + 1,
                        tid: planned.tid,
                    });
                }
                (planned.tid, planned.mode)
            }
            None => match self.free_pick() {
                Some(tid) => (tid, PickMode::Free),
                None => return Ok(Decision::Deadlock),
            },
        };
        self.permit = Some(tid);
        self.current = Some(DecisionRecord {
            step: self.steps,
            pick: tid,
            mode,
            result: None,
            enabled,
        });
        Ok(Decision::Grant { tid, mode })
    }

    /// A replayed entry may name a thread whose waiting op cannot succeed
    /// yet; it is granted anyway and its attempt yields.
    fn may_attempt(&self, planned: PlannedPick) -> bool {
        planned.mode == PickMode::Replay
            && self.status(planned.tid).is_some_and(|s| {
                s.state != ThreadState::Ended && s.pending_op.is_some_and(|op| op.is_waiting())
            })
    }

    fn free_pick(&self) -> Option<ThreadId> {
        let candidates = self.candidates();
        let live = self.live_threads() as u32;
        let status = |tid: ThreadId| &self.threads[tid.index()];
        let starving = candidates
            .iter()
            .copied()
            .filter(|&t| status(t).waited >= live)
            .max_by_key(|&t| (status(t).waited, std::cmp::Reverse(t)));
        starving.or_else(|| {
            candidates
                .iter()
                .copied()
                .max_by_key(|&t| (status(t).priority, std::cmp::Reverse(t)))
        })
    }
}
