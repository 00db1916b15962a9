//! Drives iterations: run, collect backtrack points, pick the deepest, replay
//! its prefix, force an unexplored thread there, and stop when no point is
//! left.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::PathBuf;

use crate::dispatch::{decode_point, encode_point};
use crate::dpor;
use crate::error::{CheckError, SchedulerError};
use crate::model::{BacktrackPoint, PointKey, ThreadId, Trace, ViolationReport};
use crate::runtime::{run_execution, Ending, ExecutionResult, Plan, RunConfig};
use crate::scheduler::estimate_bound;
use crate::shadow::ProgramHandle;
use crate::tracer::{Found, Tracer};

/// Bound used when a program declares no partition counts.
pub const FALLBACK_BOUND: usize = 1000;
const BOUND_FACTOR: u64 = 10;
/// Iterations between two flushes of the on-disk store.
const FLUSH_EVERY: u64 = 64;

/// Default depth bound of a program: its estimated step count times ten.
pub fn default_bound(program: &ProgramHandle) -> usize {
    estimate_bound(program.partitions())
        .map(|b| (b * BOUND_FACTOR) as usize)
        .unwrap_or(FALLBACK_BOUND)
}

#[derive(Debug, Clone)]
pub struct ExplorationConfig {
    /// Defaults to [`default_bound`].
    pub bound: Option<usize>,
    pub dpor_enabled: bool,
    pub race_enabled: bool,
    pub strict_races: bool,
    pub out_dir: Option<PathBuf>,
    pub node_count: u32,
    pub keep_all_traces: bool,
    /// Schedule prefix replayed before iteration 0 continues freely.
    pub seed_trace: Option<Vec<ThreadId>>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            bound: None,
            dpor_enabled: true,
            race_enabled: true,
            strict_races: false,
            out_dir: None,
            node_count: 1,
            keep_all_traces: false,
            seed_trace: None,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<(), CheckError> {
        if self.bound == Some(0) {
            return Err(CheckError::Config("bound must be at least 1".into()));
        }
        if self.node_count == 0 {
            return Err(CheckError::Config("node count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run_config(&self, program: &ProgramHandle) -> RunConfig {
        RunConfig {
            bound: self.bound.unwrap_or_else(|| default_bound(program)),
            race_detection: self.race_enabled,
            strict_races: self.strict_races,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExplorationReport {
    pub iterations_run: u64,
    pub violations: Vec<Found>,
    pub bound_warnings: u64,
    pub points_explored: u64,
}

impl ExplorationReport {
    pub fn merge(&mut self, other: ExplorationReport) {
        self.iterations_run += other.iterations_run;
        self.violations.extend(other.violations);
        self.bound_warnings += other.bound_warnings;
        self.points_explored += other.points_explored;
    }

    /// Sorts violations by node, iteration and kind.
    pub fn normalize(&mut self) {
        self.violations.sort_by(|a, b| {
            (a.node, a.report.iteration(), a.report.kind()).cmp(&(
                b.node,
                b.report.iteration(),
                b.report.kind(),
            ))
        });
    }
}

/// Backtrack points of one node, keyed by prefix.
///
/// The done sets of deleted points are remembered, so that a point created
/// again later does not re-explore threads that were already tried there.
#[derive(Debug, Default)]
pub struct BacktrackStore {
    points: BTreeMap<PointKey, BacktrackPoint>,
    retired: HashMap<PointKey, BTreeSet<ThreadId>>,
}

impl BacktrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &BacktrackPoint> {
        self.points.values()
    }

    pub fn get(&self, key: &PointKey) -> Option<&BacktrackPoint> {
        self.points.get(key)
    }

    /// Adds a point received from elsewhere, merging with an existing one.
    pub fn insert(&mut self, point: BacktrackPoint) -> Result<(), CheckError> {
        point
            .validate()
            .map_err(|e| CheckError::CorruptStore(e.to_string()))?;
        let key = point.key();
        match self.points.get_mut(&key) {
            Some(existing) => {
                existing.done.extend(point.done);
                existing.pending.extend(point.pending);
                let done = existing.done.clone();
                existing.pending.retain(|t| !done.contains(t));
                if existing.pending.is_empty() {
                    self.retire(key);
                }
            }
            None => {
                self.points.insert(key, point);
            }
        }
        Ok(())
    }

    /// Records that `tid` should be tried after `prefix`, where `taken` is
    /// the thread the current execution ran there.
    pub fn add(&mut self, prefix: &[ThreadId], taken: ThreadId, tid: ThreadId, iteration: u64) {
        let key = PointKey::of_prefix(prefix);
        if let Some(point) = self.points.get_mut(&key) {
            point.done.insert(taken);
            if !point.done.contains(&tid) {
                point.pending.insert(tid);
            }
            return;
        }
        let mut done = self.retired.get(&key).cloned().unwrap_or_default();
        done.insert(taken);
        if done.contains(&tid) {
            self.retired.insert(key, done);
            return;
        }
        let mut point = BacktrackPoint::new(prefix.to_vec(), iteration);
        point.done = done;
        point.pending.insert(tid);
        self.retired.remove(&key);
        self.points.insert(key, point);
    }

    fn retire(&mut self, key: PointKey) {
        if let Some(point) = self.points.remove(&key) {
            self.retired.insert(key, point.done);
        }
    }

    /// Removes and returns every stored point, ordered by depth (deepest
    /// first) and then discovery.
    pub fn drain_ordered(&mut self) -> Vec<BacktrackPoint> {
        let mut points: Vec<BacktrackPoint> =
            std::mem::take(&mut self.points).into_values().collect();
        points.sort_by(|a, b| {
            b.depth
                .cmp(&a.depth)
                .then(a.discovery_iteration.cmp(&b.discovery_iteration))
                .then(a.key().cmp(&b.key()))
        });
        points
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        for point in self.points.values() {
            out.push_str(&encode_point(point));
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self, CheckError> {
        let mut store = BacktrackStore::new();
        for (i, line) in text.lines().enumerate() {
            let point =
                decode_point(line, i + 1).map_err(|e| CheckError::CorruptStore(e.to_string()))?;
            store.insert(point)?;
        }
        Ok(store)
    }
}

/// The deepest point; ties go to the most recently discovered one, then to
/// the smaller key.
pub fn select_point(store: &BacktrackStore) -> Option<PointKey> {
    store
        .points
        .values()
        .max_by(|a, b| {
            a.depth
                .cmp(&b.depth)
                .then(a.discovery_iteration.cmp(&b.discovery_iteration))
                .then(b.key().cmp(&a.key()))
        })
        .map(BacktrackPoint::key)
}

/// Takes the smallest pending thread of a point and marks it done. The point
/// is deleted once nothing is pending.
pub fn branch(store: &mut BacktrackStore, key: PointKey) -> Option<(Vec<ThreadId>, ThreadId)> {
    let point = store.points.get_mut(&key)?;
    let tid = point.pending.pop_first()?;
    point.done.insert(tid);
    let prefix = point.prefix.clone();
    if point.pending.is_empty() {
        store.retire(key);
    }
    Some((prefix, tid))
}

/// Backtrack requests raised by one execution, as `(depth, tid)` pairs.
pub fn collect_additions(result: &ExecutionResult, dpor_enabled: bool) -> Vec<(usize, ThreadId)> {
    let log = &result.log;
    let mut additions = Vec::new();
    if dpor_enabled {
        for depth in 0..log.len() {
            additions.extend(dpor::on_execute(log, depth));
        }
        if result.ending == Ending::Deadlock {
            for op in &result.leftover {
                additions.extend(dpor::on_pending(log, op.tid(), op));
            }
        }
    } else {
        for (depth, step) in log.steps().iter().enumerate() {
            additions.extend(step.enabled.iter().map(|&tid| (depth, tid)));
        }
    }
    additions
}

pub fn absorb_additions(
    store: &mut BacktrackStore,
    additions: &[(usize, ThreadId)],
    schedule: &[ThreadId],
    iteration: u64,
) {
    for &(depth, tid) in additions {
        if depth < schedule.len() {
            store.add(&schedule[..depth], schedule[depth], tid, iteration);
        }
    }
}

type Observer<'a> = Box<dyn FnMut(u64, &ExecutionResult) + 'a>;

/// Explorer of one node.
pub struct Explorer<'a> {
    program: ProgramHandle,
    config: ExplorationConfig,
    run: RunConfig,
    node: u32,
    store: BacktrackStore,
    tracer: Option<Tracer>,
    report: ExplorationReport,
    next_iteration: u64,
    observer: Option<Observer<'a>>,
}

impl<'a> Explorer<'a> {
    pub fn new(
        program: &ProgramHandle,
        config: &ExplorationConfig,
        node: u32,
    ) -> Result<Self, CheckError> {
        config.validate()?;
        let tracer = match &config.out_dir {
            Some(dir) => Some(Tracer::new(dir, node, config.keep_all_traces)?),
            None => None,
        };
        Ok(Explorer {
            run: config.run_config(program),
            program: program.clone(),
            config: config.clone(),
            node,
            store: BacktrackStore::new(),
            tracer,
            report: ExplorationReport::default(),
            next_iteration: 0,
            observer: None,
        })
    }

    /// Calls `f` with the iteration number and result of every execution.
    pub fn observe(&mut self, f: impl FnMut(u64, &ExecutionResult) + 'a) {
        self.observer = Some(Box::new(f));
    }

    /// Iteration numbers handed out next start at `n`.
    pub fn start_numbering_at(&mut self, n: u64) {
        self.next_iteration = n;
    }

    pub fn store(&self) -> &BacktrackStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BacktrackStore {
        &mut self.store
    }

    pub fn bound(&self) -> usize {
        self.run.bound
    }

    /// Iteration 0: free run, optionally after the configured seed prefix.
    pub fn run_initial(&mut self) -> Result<(), CheckError> {
        let plan = Plan {
            prefix: self.config.seed_trace.clone().unwrap_or_default(),
            force: None,
            stop_after_plan: false,
        };
        self.iterate(plan)
    }

    /// Explores points until the store is empty.
    pub fn drain(&mut self) -> Result<(), CheckError> {
        while let Some(key) = select_point(&self.store) {
            let Some((prefix, tid)) = branch(&mut self.store, key) else {
                break;
            };
            self.report.points_explored += 1;
            let plan = Plan {
                prefix,
                force: Some(tid),
                stop_after_plan: false,
            };
            self.iterate(plan)?;
            if self.next_iteration.is_multiple_of(FLUSH_EVERY) {
                self.flush_store()?;
            }
        }
        Ok(())
    }

    fn iterate(&mut self, plan: Plan) -> Result<(), CheckError> {
        let iteration = self.next_iteration;
        self.next_iteration += 1;
        let result = match run_execution(&self.program, &plan, &self.run) {
            Err(CheckError::Scheduler(SchedulerError::ReplayDivergence { step, tid })) => {
                return Err(CheckError::CorruptStore(format!(
                    "iteration {iteration}: replay diverged at step {step}, thread {tid} not enabled"
                )))
            }
            other => other?,
        };
        self.report.iterations_run += 1;
        let schedule = result.schedule();
        let mut violations = Vec::new();
        if let Some((detail, steps)) = &result.race {
            let report = ViolationReport::data_race(Trace::new(steps.clone(), iteration), *detail)
                .map_err(|e| CheckError::CorruptStore(e.to_string()))?;
            violations.push(report);
        }
        match result.ending {
            Ending::Deadlock => violations.push(ViolationReport::deadlock(Trace::new(
                schedule.clone(),
                iteration,
            ))),
            Ending::Livelock => violations.push(ViolationReport::livelock(Trace::new(
                schedule.clone(),
                iteration,
            ))),
            Ending::BoundWarning => self.report.bound_warnings += 1,
            Ending::NormalEnd | Ending::Incomplete => {}
        }
        if let Some(tracer) = &mut self.tracer {
            tracer.open_iteration(iteration);
            for &tid in &schedule {
                tracer.record_step(tid);
            }
            tracer.close_iteration(&violations)?;
        }
        self.report
            .violations
            .extend(violations.into_iter().map(|report| Found {
                node: self.node,
                report,
            }));
        // a run cut off by the bound is not a complete execution; branching
        // off its tail would only produce more truncated runs
        if !matches!(result.ending, Ending::Livelock | Ending::BoundWarning) {
            let additions = collect_additions(&result, self.config.dpor_enabled);
            absorb_additions(&mut self.store, &additions, &schedule, iteration);
        }
        if let Some(observer) = &mut self.observer {
            observer(iteration, &result);
        }
        Ok(())
    }

    fn flush_store(&self) -> Result<(), CheckError> {
        if let Some(dir) = &self.config.out_dir {
            let path = dir.join(format!("btstore.node{}", self.node));
            fs::write(&path, self.store.encode()).map_err(|e| CheckError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ExplorationReport, CheckError> {
        self.flush_store()?;
        Ok(self.report)
    }
}

/// Explores `program` on a single node.
pub fn explore(
    program: &ProgramHandle,
    config: &ExplorationConfig,
) -> Result<ExplorationReport, CheckError> {
    let mut explorer = Explorer::new(program, config, 0)?;
    explorer.run_initial()?;
    explorer.drain()?;
    let mut report = explorer.finish()?;
    report.normalize();
    if let Some(dir) = &config.out_dir {
        crate::tracer::write_report(dir, &report.violations)?;
    }
    Ok(report)
}
