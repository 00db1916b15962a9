//! Trace files, violation files and deterministic replay.
//!
//! A trace file lists the scheduled thread of every step, one per line:
//!
//! ```text
//! 1 0.
//! 2 0.
//! 3 1.
//! 4 2.
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{CheckError, TraceError};
use crate::model::{RaceDetail, ThreadId, Trace, ViolationKind, ViolationReport, VisibleOp};
use crate::runtime::{run_execution, Ending, Plan, RunConfig};
use crate::scheduler::DecisionRecord;
use crate::shadow::ProgramHandle;

pub const TRACE_DIR: &str = "traces";
pub const REPORT_FILE: &str = "report.txt";

pub fn render_trace(steps: &[ThreadId]) -> String {
    let mut out = String::new();
    for (i, tid) in steps.iter().enumerate() {
        let _ = writeln!(out, "{} {}.", i + 1, tid);
    }
    out
}

/// Strict parse: indices must start at 1 and be contiguous, and every line
/// must be exactly `<index> <tid>.`.
pub fn parse_trace_str(text: &str, origin: &str) -> Result<Vec<ThreadId>, TraceError> {
    let mut steps = Vec::new();
    let fail = |line: usize, reason: String| TraceError::Parse {
        path: origin.to_string(),
        line,
        reason,
    };
    for (i, line) in text.split_terminator('\n').enumerate() {
        let lineno = i + 1;
        let body = line
            .strip_suffix('.')
            .ok_or_else(|| fail(lineno, "missing trailing period".into()))?;
        let (idx, tid) = body
            .split_once(' ')
            .ok_or_else(|| fail(lineno, "expected `<index> <tid>.`".into()))?;
        let idx: usize =
            parse_number(idx).ok_or_else(|| fail(lineno, format!("bad index `{idx}`")))?;
        let tid: u32 =
            parse_number(tid).ok_or_else(|| fail(lineno, format!("bad thread id `{tid}`")))?;
        if idx != lineno {
            return Err(fail(
                lineno,
                format!("expected index {lineno}, found {idx}"),
            ));
        }
        steps.push(ThreadId(tid));
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(fail(steps.len(), "missing final newline".into()));
    }
    Ok(steps)
}

fn parse_number<T: std::str::FromStr>(s: &str) -> Option<T> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

pub fn parse_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let steps = parse_trace_str(&text, &path.display().to_string())?;
    Ok(Trace::new(steps, 0))
}

pub fn write_trace(path: &Path, steps: &[ThreadId]) -> Result<(), CheckError> {
    fs::write(path, render_trace(steps)).map_err(|e| CheckError::io(path, e))
}

/// File name of a violation trace. Nodes other than 0 prefix their names so
/// that per-node iteration numbers never clash.
pub fn violation_file_name(kind: ViolationKind, iteration: u64, node: u32) -> String {
    let base = match kind {
        ViolationKind::Deadlock => format!("bt_{iteration}_deadlock"),
        ViolationKind::Livelock => format!("bt_{iteration}_livelock"),
        ViolationKind::DataRace => format!("data_race{iteration}"),
    };
    if node == 0 {
        base
    } else {
        format!("n{node}_{base}")
    }
}

pub fn iteration_file_name(iteration: u64, node: u32) -> String {
    if node == 0 {
        format!("iter_{iteration}")
    } else {
        format!("n{node}_iter_{iteration}")
    }
}

/// A violation together with the node that found it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Found {
    pub node: u32,
    pub report: ViolationReport,
}

impl Found {
    pub fn file_name(&self) -> String {
        violation_file_name(self.report.kind(), self.report.iteration(), self.node)
    }

    /// The line this violation contributes to `report.txt`.
    pub fn report_line(&self) -> String {
        let r = &self.report;
        match r.race_detail() {
            Some(d) => format!(
                "{} iteration={} object={} readers={} writers={} trace={}",
                r.kind(),
                r.iteration(),
                d.object,
                d.readers_pending,
                d.writers_pending,
                self.file_name()
            ),
            None => format!(
                "{} iteration={} trace={}",
                r.kind(),
                r.iteration(),
                self.file_name()
            ),
        }
    }
}

/// Per-node writer of trace files.
#[derive(Debug)]
pub struct Tracer {
    dir: PathBuf,
    node: u32,
    keep_all: bool,
    iteration: u64,
    steps: Vec<ThreadId>,
}

impl Tracer {
    pub fn new(out_dir: &Path, node: u32, keep_all: bool) -> Result<Self, CheckError> {
        let dir = out_dir.join(TRACE_DIR);
        fs::create_dir_all(&dir).map_err(|e| CheckError::io(&dir, e))?;
        Ok(Tracer {
            dir,
            node,
            keep_all,
            iteration: 0,
            steps: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn open_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
        self.steps.clear();
    }

    pub fn record_step(&mut self, tid: ThreadId) {
        self.steps.push(tid);
    }

    /// Writes the violation traces of the iteration, and the plain iteration
    /// trace when every trace is kept. Returns the paths written.
    pub fn close_iteration(
        &mut self,
        violations: &[ViolationReport],
    ) -> Result<Vec<PathBuf>, CheckError> {
        let mut written = Vec::new();
        if self.keep_all {
            let path = self
                .dir
                .join(iteration_file_name(self.iteration, self.node));
            write_trace(&path, &self.steps)?;
            written.push(path);
        }
        for v in violations {
            let path = self
                .dir
                .join(violation_file_name(v.kind(), v.iteration(), self.node));
            write_trace(&path, &v.trace().steps)?;
            written.push(path);
        }
        self.steps.clear();
        Ok(written)
    }
}

/// Writes `report.txt`: a timestamp header, then one line per violation.
pub fn write_report(out_dir: &Path, found: &[Found]) -> Result<PathBuf, CheckError> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!("# generated unix={secs}\n");
    for f in found {
        text.push_str(&f.report_line());
        text.push('\n');
    }
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, text).map_err(|e| CheckError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub ending: Ending,
    pub race: Option<RaceDetail>,
    /// Executed visible operations, in order.
    pub ops: Vec<VisibleOp>,
    pub decisions: Vec<DecisionRecord>,
}

impl ReplayReport {
    /// Violations reproduced by the replay.
    pub fn kinds(&self) -> Vec<ViolationKind> {
        let mut kinds = Vec::new();
        if self.race.is_some() {
            kinds.push(ViolationKind::DataRace);
        }
        match self.ending {
            Ending::Deadlock => kinds.push(ViolationKind::Deadlock),
            Ending::Livelock => kinds.push(ViolationKind::Livelock),
            _ => {}
        }
        kinds
    }

    /// The visible-op log, one `<index> <op>` line per executed step.
    pub fn op_log(&self) -> String {
        let mut out = String::new();
        for (i, op) in self.ops.iter().enumerate() {
            let _ = writeln!(out, "{} {}", i + 1, op);
        }
        out
    }

    pub fn status_line(&self) -> String {
        let status = match self.ending {
            Ending::NormalEnd => "normal-end",
            Ending::Deadlock => "deadlock",
            Ending::Livelock => "livelock",
            Ending::BoundWarning => "bound-warning",
            Ending::Incomplete => "incomplete",
        };
        match self.race {
            Some(d) => format!(
                "status={status} data-race object={} readers={} writers={}",
                d.object, d.readers_pending, d.writers_pending
            ),
            None => format!("status={status}"),
        }
    }
}

/// Drives `program` through exactly the steps of `trace`.
pub fn replay(
    program: &ProgramHandle,
    trace: &[ThreadId],
    config: &RunConfig,
) -> Result<ReplayReport, CheckError> {
    let plan = Plan {
        prefix: trace.to_vec(),
        force: None,
        stop_after_plan: true,
    };
    let result = run_execution(program, &plan, config)?;
    Ok(ReplayReport {
        ending: result.ending.clone(),
        race: result.race.as_ref().map(|(d, _)| *d),
        ops: result.log.steps().iter().map(|s| s.op).collect(),
        decisions: result.decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tids(v: &[u32]) -> Vec<ThreadId> {
        v.iter().copied().map(ThreadId).collect()
    }

    #[test]
    fn renders_golden_shape() {
        assert_eq!(
            render_trace(&tids(&[0, 0, 1, 2])),
            "1 0.\n2 0.\n3 1.\n4 2.\n"
        );
        assert_eq!(render_trace(&[]), "");
    }

    #[test]
    fn parses_sample_traces() {
        assert_eq!(
            parse_trace_str("1 0.\n2 0.\n3 0.\n4 0.\n", "t").unwrap(),
            tids(&[0, 0, 0, 0])
        );
        assert_eq!(
            parse_trace_str("1 0.\n2 0.\n3 1.\n4 2.\n", "t").unwrap(),
            tids(&[0, 0, 1, 2])
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "2 0.\n",
            "1 0.\n3 1.\n",
            "1 0\n",
            "1  0.\n",
            "1 0.\nx\n",
            "1 0.",
            "1 -1.\n",
            "1 0. \n",
        ] {
            assert!(parse_trace_str(bad, "t").is_err(), "accepted {bad:?}");
        }
        match parse_trace_str("1 0.\n3 1.\n", "t") {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_names() {
        assert_eq!(
            violation_file_name(ViolationKind::Deadlock, 1, 0),
            "bt_1_deadlock"
        );
        assert_eq!(
            violation_file_name(ViolationKind::Livelock, 3, 0),
            "bt_3_livelock"
        );
        assert_eq!(
            violation_file_name(ViolationKind::DataRace, 0, 0),
            "data_race0"
        );
        assert_eq!(
            violation_file_name(ViolationKind::DataRace, 4, 2),
            "n2_data_race4"
        );
    }
}
