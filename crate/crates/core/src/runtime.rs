//! Runs one execution of a program under the scheduler.
//!
//! The controller waits until the permit holder and every thread that has
//! not yet announced its first operation have settled, then asks the
//! scheduler for the next pick. Program effects only happen while a thread
//! holds the permit, so the order of events is fully determined by the
//! sequence of picks.

use std::collections::BTreeSet;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};

use crate::dpor::{ExecutionLog, LoggedStep};
use crate::error::{CheckError, ShadowError};
use crate::model::{RaceDetail, ThreadId, Trace, VisibleOp};
use crate::race::RaceDetector;
use crate::scheduler::{
    check_bound, classify_overrun, BoundCheck, Decision, DecisionRecord, IterationOutcome,
    Scheduler,
};
use crate::shadow::{start_thread, ProgramHandle, Shared};
use crate::world::{Event, Grant, ObjectState, WaitOn, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    /// Steps allowed before the execution is cut off.
    pub bound: usize,
    pub race_detection: bool,
    pub strict_races: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bound: 1000,
            race_detection: true,
            strict_races: false,
        }
    }
}

/// What to schedule before free picks take over.
#[derive(Debug, Clone, Default)]
pub struct Plan {
    pub prefix: Vec<ThreadId>,
    pub force: Option<ThreadId>,
    /// Stop as soon as the planned picks are used up.
    pub stop_after_plan: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ending {
    NormalEnd,
    Deadlock,
    /// The bound was exceeded and every enabled thread kept running.
    Livelock,
    /// The bound was exceeded while some thread was starved.
    BoundWarning,
    /// Planned picks ran out with threads still able to run.
    Incomplete,
}

#[derive(Debug, Clone)]
pub struct ExecutionResult {
    pub log: ExecutionLog,
    pub ending: Ending,
    /// First race seen, with the schedule up to and including the step
    /// during which it was detected.
    pub race: Option<(RaceDetail, Vec<ThreadId>)>,
    pub decisions: Vec<DecisionRecord>,
    /// Operations announced but never executed when the execution stopped.
    pub leftover: Vec<VisibleOp>,
    pub objects: Vec<ObjectState>,
}

impl ExecutionResult {
    pub fn schedule(&self) -> Vec<ThreadId> {
        self.log.schedule()
    }

    /// Values of the shared cells, in registration order.
    pub fn cell_values(&self) -> Vec<i64> {
        self.objects
            .iter()
            .filter_map(|o| match o {
                ObjectState::Cell(v) => Some(*v),
                _ => None,
            })
            .collect()
    }
}

struct Controller {
    shared: Arc<Shared>,
    events: mpsc::Receiver<Event>,
    permits: Vec<Sender<Grant>>,
    waits: Vec<Option<WaitOn>>,
    /// Threads whose next message is still outstanding.
    unsettled: BTreeSet<ThreadId>,
    scheduler: Scheduler,
    races: RaceDetector,
    race_detection: bool,
    race: Option<RaceDetail>,
}

impl Controller {
    fn handle(&mut self, event: Event) -> Result<(), CheckError> {
        match event {
            Event::Created { child, permit } => {
                self.scheduler.on_created(child)?;
                self.permits.push(permit);
                self.waits.push(None);
                self.unsettled.insert(child);
            }
            Event::Announce { op, wait } => {
                let tid = op.tid();
                self.scheduler.on_announce(op)?;
                self.waits[tid.index()] = wait;
                self.unsettled.remove(&tid);
            }
            Event::Pass(tid) => self.scheduler.on_pass(tid)?,
            Event::Yield(tid) => {
                self.scheduler.on_yield(tid)?;
                self.unsettled.remove(&tid);
            }
            Event::End(tid) => {
                self.shared.world().ended[tid.index()] = true;
                self.scheduler.on_end(tid)?;
                self.unsettled.remove(&tid);
            }
            Event::NoDead => {}
            Event::Registered { oid, monitored } => {
                if monitored && self.race_detection {
                    self.races.on_register(oid);
                }
            }
            Event::Pending { oid, kind } => {
                if self.race_detection {
                    if let Some(detail) = self.races.on_pending(oid, kind)? {
                        self.race.get_or_insert(detail);
                    }
                }
            }
            Event::Complete { oid, kind } => {
                if self.race_detection {
                    self.races.on_complete(oid, kind)?;
                }
            }
            Event::Failed { tid, error } => return Err(CheckError::Program { tid, source: error }),
        }
        Ok(())
    }

    fn settle(&mut self) -> Result<(), CheckError> {
        while !self.unsettled.is_empty() {
            let event = self.events.recv().map_err(|_| CheckError::Program {
                tid: ThreadId::MAIN,
                source: ShadowError::CheckerStopped,
            })?;
            self.handle(event)?;
        }
        Ok(())
    }

    fn leftover(&self) -> Vec<VisibleOp> {
        self.scheduler
            .live_tids()
            .filter_map(|tid| self.scheduler.status(tid).and_then(|s| s.pending_op))
            .collect()
    }

    fn shutdown(&mut self) {
        for permit in &self.permits {
            let _ = permit.send(Grant::Abort);
        }
        let handles = std::mem::take(
            &mut *self
                .shared
                .threads
                .lock()
                .unwrap_or_else(|e| e.into_inner()),
        );
        for handle in handles {
            let _ = handle.join();
        }
    }
}

/// Executes `program` once.
pub fn run_execution(
    program: &ProgramHandle,
    plan: &Plan,
    config: &RunConfig,
) -> Result<ExecutionResult, CheckError> {
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        events: Mutex::new(tx),
        world: Mutex::new(World::default()),
        threads: Mutex::new(Vec::new()),
    });
    let main = {
        let mut world = shared.world();
        world.ended.push(false);
        world.ids.register_thread()
    };
    let mut ctl = Controller {
        shared: Arc::clone(&shared),
        events: rx,
        permits: Vec::new(),
        waits: vec![None],
        unsettled: BTreeSet::from([main]),
        scheduler: Scheduler::with_plan(&plan.prefix, plan.force),
        races: RaceDetector::new(config.strict_races),
        race_detection: config.race_detection,
        race: None,
    };
    ctl.scheduler.on_created(main)?;
    let entry = program.entry();
    ctl.permits
        .push(start_thread(main, &shared, Box::new(move || entry()), true));

    let result = drive(&mut ctl, plan, config);
    ctl.shutdown();
    let (log, ending, race) = result?;
    let objects = shared.world().objects.clone();
    Ok(ExecutionResult {
        log,
        ending,
        race,
        decisions: ctl.scheduler.decisions().to_vec(),
        leftover: ctl.leftover(),
        objects,
    })
}

type Driven = (ExecutionLog, Ending, Option<(RaceDetail, Vec<ThreadId>)>);

fn drive(ctl: &mut Controller, plan: &Plan, config: &RunConfig) -> Result<Driven, CheckError> {
    let mut log = ExecutionLog::new();
    let mut race: Option<(RaceDetail, Vec<ThreadId>)> = None;
    let mut in_flight: Option<LoggedStep> = None;
    loop {
        ctl.settle()?;
        if let Some(step) = in_flight.take() {
            if ctl.scheduler.steps() > log.len() {
                log.push(step);
            }
        }
        if race.is_none() {
            if let Some(detail) = ctl.race {
                race = Some((detail, log.schedule()));
            }
        }
        if check_bound(log.len(), config.bound) == BoundCheck::Exceeded {
            let pairs: Vec<_> = log.steps().iter().map(|s| (s.tid, &s.enabled)).collect();
            let trace = Trace::new(log.schedule(), 0);
            let ending = match classify_overrun(&pairs, ctl.scheduler.live_threads(), trace) {
                IterationOutcome::LivelockCandidate(_) => Ending::Livelock,
                _ => Ending::BoundWarning,
            };
            return Ok((log, ending, race));
        }
        let steps = ctl.scheduler.steps();
        let world_guard = {
            let mut world = ctl.shared.world();
            world.steps = steps;
            world
        };
        if plan.stop_after_plan && !ctl.scheduler.is_planned() {
            let enabled = ctl
                .scheduler
                .enabled(&|tid| ready(&ctl.waits, &world_guard, tid));
            let ending = if ctl.scheduler.live_threads() == 0 {
                Ending::NormalEnd
            } else if enabled.is_empty() {
                Ending::Deadlock
            } else {
                Ending::Incomplete
            };
            return Ok((log, ending, race));
        }
        let decision = {
            let waits = &ctl.waits;
            let ready = |tid: ThreadId| ready(waits, &world_guard, tid);
            ctl.scheduler.pick_next(&ready)?
        };
        drop(world_guard);
        match decision {
            Decision::Grant { tid, .. } => {
                let op = ctl
                    .scheduler
                    .status(tid)
                    .and_then(|s| s.pending_op)
                    .expect("granted thread has an announced op");
                let enabled = current_enabled(ctl);
                in_flight = Some(LoggedStep { tid, op, enabled });
                ctl.unsettled.insert(tid);
                let _ = ctl.permits[tid.index()].send(Grant::Go);
            }
            Decision::NormalEnd => return Ok((log, Ending::NormalEnd, race)),
            Decision::Deadlock => return Ok((log, Ending::Deadlock, race)),
        }
    }
}

fn ready(waits: &[Option<WaitOn>], world: &World, tid: ThreadId) -> bool {
    waits
        .get(tid.index())
        .copied()
        .flatten()
        .is_none_or(|w| world.ready(w))
}

fn current_enabled(ctl: &Controller) -> BTreeSet<ThreadId> {
    let world = ctl.shared.world();
    ctl.scheduler.enabled(&|tid| ready(&ctl.waits, &world, tid))
}
