//! Splitting exploration across nodes.
//!
//! After iteration 0 the master partitions the discovered backtrack points
//! round-robin over the nodes. Node 0 is the master itself; every other node
//! receives its share over a line-oriented link, explores it together with
//! whatever it discovers, and sends back its report.
//!
//! Protocol, master to worker:
//!
//! ```text
//! HELLO <node>
//! CONFIG program=<name> bound=<n> dpor=<0|1> race=<0|1> strict=<0|1>
//! WORKLOAD <count>
//! <count point records>
//! ```
//!
//! The worker answers `HELLO <node>` on connection and, once finished,
//! `DONE` followed by a serialized report. The master closes with `BYE`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread;

use crate::error::{CheckError, DispatchError};
use crate::explorer::{ExplorationConfig, ExplorationReport, Explorer};
use crate::model::{
    BacktrackPoint, ObjectId, RaceDetail, ThreadId, Trace, ViolationKind, ViolationReport,
};
use crate::shadow::ProgramHandle;
use crate::tracer::{write_report, write_trace, Found, Tracer};

/// Points assigned to one node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Workload {
    pub node_id: u32,
    pub points: Vec<BacktrackPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Working,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeStatus {
    pub node_id: u32,
    pub state: NodeState,
    pub violations_so_far: usize,
}

/// Round-robin over points sorted by depth (deepest first), then discovery.
pub fn partition(points: Vec<BacktrackPoint>, n: u32) -> Vec<Workload> {
    let n = n.max(1);
    let mut sorted = points;
    sorted.sort_by(|a, b| {
        b.depth
            .cmp(&a.depth)
            .then(a.discovery_iteration.cmp(&b.discovery_iteration))
            .then(a.key().cmp(&b.key()))
    });
    let mut loads: Vec<Workload> = (0..n)
        .map(|node_id| Workload {
            node_id,
            points: Vec::new(),
        })
        .collect();
    for (i, point) in sorted.into_iter().enumerate() {
        loads[i % n as usize].points.push(point);
    }
    loads
}

fn csv(tids: impl IntoIterator<Item = ThreadId>) -> String {
    tids.into_iter()
        .map(|t| t.0.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_csv(field: &str, line: usize) -> Result<Vec<ThreadId>, DispatchError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|s| {
            s.parse().map(ThreadId).map_err(|_| DispatchError::Codec {
                line,
                reason: format!("bad thread id `{s}`"),
            })
        })
        .collect()
}

/// `depth=<d> iter=<i> done=<csv> pending=<csv> prefix=<csv>`
pub fn encode_point(point: &BacktrackPoint) -> String {
    format!(
        "depth={} iter={} done={} pending={} prefix={}",
        point.depth,
        point.discovery_iteration,
        csv(point.done.iter().copied()),
        csv(point.pending.iter().copied()),
        csv(point.prefix.iter().copied())
    )
}

/// Splits `k1=v1 k2=v2 ...`, requiring exactly the given keys in order.
fn fields<'a>(text: &'a str, keys: &[&str], line: usize) -> Result<Vec<&'a str>, DispatchError> {
    let parts: Vec<&str> = text.split(' ').collect();
    if parts.len() != keys.len() {
        return Err(DispatchError::Codec {
            line,
            reason: format!("expected {} fields, found {}", keys.len(), parts.len()),
        });
    }
    parts
        .iter()
        .zip(keys)
        .map(|(part, key)| {
            part.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| DispatchError::Codec {
                    line,
                    reason: format!("expected `{key}=`, found `{part}`"),
                })
        })
        .collect()
}

fn number<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, DispatchError> {
    s.parse().map_err(|_| DispatchError::Codec {
        line,
        reason: format!("bad {what} `{s}`"),
    })
}

pub fn decode_point(text: &str, line: usize) -> Result<BacktrackPoint, DispatchError> {
    let f = fields(text, &["depth", "iter", "done", "pending", "prefix"], line)?;
    let depth: usize = number(f[0], "depth", line)?;
    let discovery_iteration: u64 = number(f[1], "iteration", line)?;
    let done: BTreeSet<ThreadId> = parse_csv(f[2], line)?.into_iter().collect();
    let pending: BTreeSet<ThreadId> = parse_csv(f[3], line)?.into_iter().collect();
    let prefix = parse_csv(f[4], line)?;
    let point = BacktrackPoint {
        depth,
        prefix,
        pending,
        done,
        discovery_iteration,
    };
    point.validate().map_err(|e| DispatchError::Codec {
        line,
        reason: e.to_string(),
    })?;
    Ok(point)
}

fn encode_violation(v: &ViolationReport) -> String {
    let mut line = format!(
        "kind={} iter={} trace={}",
        v.kind(),
        v.iteration(),
        csv(v.trace().steps.iter().copied())
    );
    if let Some(d) = v.race_detail() {
        line.push_str(&format!(
            " object={} readers={} writers={}",
            d.object, d.readers_pending, d.writers_pending
        ));
    }
    line
}

fn decode_violation(text: &str, line: usize) -> Result<ViolationReport, DispatchError> {
    let bad = |reason: String| DispatchError::Codec { line, reason };
    let racy = text.contains(" object=");
    let keys: &[&str] = if racy {
        &["kind", "iter", "trace", "object", "readers", "writers"]
    } else {
        &["kind", "iter", "trace"]
    };
    let f = fields(text, keys, line)?;
    let kind: ViolationKind = f[0]
        .parse()
        .map_err(|e: crate::error::ModelError| bad(e.to_string()))?;
    let iteration: u64 = number(f[1], "iteration", line)?;
    let trace = Trace::new(parse_csv(f[2], line)?, iteration);
    match (kind, racy) {
        (ViolationKind::Deadlock, false) => Ok(ViolationReport::deadlock(trace)),
        (ViolationKind::Livelock, false) => Ok(ViolationReport::livelock(trace)),
        (ViolationKind::DataRace, true) => {
            let detail = RaceDetail {
                object: ObjectId(number(f[3], "object", line)?),
                readers_pending: number(f[4], "readers", line)?,
                writers_pending: number(f[5], "writers", line)?,
            };
            ViolationReport::data_race(trace, detail).map_err(|e| bad(e.to_string()))
        }
        _ => Err(bad("race details do not match the violation kind".into())),
    }
}

/// Report lines following `DONE`: a summary line, then one line per
/// violation.
pub fn encode_report(report: &ExplorationReport) -> Vec<String> {
    let mut lines = vec![format!(
        "iterations={} bound_warnings={} points={} violations={}",
        report.iterations_run,
        report.bound_warnings,
        report.points_explored,
        report.violations.len()
    )];
    lines.extend(
        report
            .violations
            .iter()
            .map(|f| encode_violation(&f.report)),
    );
    lines
}

/// Decodes the summary line and returns the report and the number of
/// violation lines that follow.
fn decode_summary(text: &str, line: usize) -> Result<(ExplorationReport, usize), DispatchError> {
    let f = fields(
        text,
        &["iterations", "bound_warnings", "points", "violations"],
        line,
    )?;
    Ok((
        ExplorationReport {
            iterations_run: number(f[0], "count", line)?,
            bound_warnings: number(f[1], "count", line)?,
            points_explored: number(f[2], "count", line)?,
            violations: Vec::new(),
        },
        number(f[3], "count", line)?,
    ))
}

pub fn decode_report(lines: &[String], node: u32) -> Result<ExplorationReport, DispatchError> {
    let first = lines.first().ok_or(DispatchError::Codec {
        line: 1,
        reason: "empty report".into(),
    })?;
    let (mut report, count) = decode_summary(first, 1)?;
    if lines.len() != count + 1 {
        return Err(DispatchError::Codec {
            line: lines.len(),
            reason: format!("expected {count} violation lines"),
        });
    }
    for (i, text) in lines[1..].iter().enumerate() {
        report.violations.push(Found {
            node,
            report: decode_violation(text, i + 2)?,
        });
    }
    Ok(report)
}

/// A bidirectional, ordered stream of text lines.
pub trait Link {
    fn send(&mut self, line: &str) -> Result<(), DispatchError>;
    fn recv(&mut self) -> Result<String, DispatchError>;
}

/// In-memory link; both ends are created by [`memory_pair`].
pub struct MemoryLink {
    node: u32,
    tx: Sender<String>,
    rx: Receiver<String>,
}

pub fn memory_pair(node: u32) -> (MemoryLink, MemoryLink) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    (
        MemoryLink {
            node,
            tx: a_tx,
            rx: b_rx,
        },
        MemoryLink {
            node,
            tx: b_tx,
            rx: a_rx,
        },
    )
}

fn closed(node: u32) -> DispatchError {
    DispatchError::Connection {
        node,
        source: std::io::Error::new(std::io::ErrorKind::BrokenPipe, "link closed"),
    }
}

impl Link for MemoryLink {
    fn send(&mut self, line: &str) -> Result<(), DispatchError> {
        self.tx
            .send(line.to_string())
            .map_err(|_| closed(self.node))
    }

    fn recv(&mut self) -> Result<String, DispatchError> {
        self.rx.recv().map_err(|_| closed(self.node))
    }
}

pub struct TcpLink {
    node: u32,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpLink {
    pub fn new(node: u32, stream: TcpStream) -> Result<Self, DispatchError> {
        let writer = stream
            .try_clone()
            .map_err(|source| DispatchError::Connection { node, source })?;
        Ok(TcpLink {
            node,
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn connect(node: u32, addr: impl ToSocketAddrs) -> Result<Self, DispatchError> {
        let stream = TcpStream::connect(addr)
            .map_err(|source| DispatchError::Connection { node, source })?;
        Self::new(node, stream)
    }
}

impl Link for TcpLink {
    fn send(&mut self, line: &str) -> Result<(), DispatchError> {
        let node = self.node;
        writeln!(self.writer, "{line}")
            .and_then(|_| self.writer.flush())
            .map_err(|source| DispatchError::Connection { node, source })
    }

    fn recv(&mut self) -> Result<String, DispatchError> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|source| DispatchError::Connection {
                node: self.node,
                source,
            })?;
        if n == 0 {
            return Err(closed(self.node));
        }
        if line.ends_with('\n') {
            line.pop();
        }
        Ok(line)
    }
}

fn expect_prefix<'a>(line: &'a str, prefix: &str, node: u32) -> Result<&'a str, DispatchError> {
    line.strip_prefix(prefix)
        .ok_or_else(|| DispatchError::Unexpected {
            node,
            message: line.to_string(),
        })
}

/// Sends the handshake, configuration and workload.
pub fn send_workload(
    link: &mut dyn Link,
    program: &str,
    config: &ExplorationConfig,
    bound: usize,
    workload: &Workload,
) -> Result<(), DispatchError> {
    let node = workload.node_id;
    link.send(&format!("HELLO {node}"))?;
    let flag = |b: bool| u8::from(b);
    link.send(&format!(
        "CONFIG program={program} bound={bound} dpor={} race={} strict={}",
        flag(config.dpor_enabled),
        flag(config.race_enabled),
        flag(config.strict_races)
    ))?;
    link.send(&format!("WORKLOAD {}", workload.points.len()))?;
    for point in &workload.points {
        link.send(&encode_point(point))?;
    }
    let reply = link.recv()?;
    let id = expect_prefix(&reply, "HELLO ", node)?;
    if id != node.to_string() {
        return Err(DispatchError::Unexpected {
            node,
            message: reply,
        });
    }
    Ok(())
}

/// Worker side of [`send_workload`]: returns the program name, the
/// configuration and the workload.
pub fn receive_workload(
    link: &mut dyn Link,
) -> Result<(String, ExplorationConfig, Workload), DispatchError> {
    let hello = link.recv()?;
    let node: u32 = number(expect_prefix(&hello, "HELLO ", 0)?, "node id", 1)?;
    let config_line = link.recv()?;
    let f = fields(
        expect_prefix(&config_line, "CONFIG ", node)?,
        &["program", "bound", "dpor", "race", "strict"],
        2,
    )?;
    let on = |s: &str| s == "1";
    let config = ExplorationConfig {
        bound: Some(number(f[1], "bound", 2)?),
        dpor_enabled: on(f[2]),
        race_enabled: on(f[3]),
        strict_races: on(f[4]),
        ..ExplorationConfig::default()
    };
    let program = f[0].to_string();
    let header = link.recv()?;
    let count: usize = number(expect_prefix(&header, "WORKLOAD ", node)?, "count", 3)?;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        points.push(decode_point(&link.recv()?, i + 4)?);
    }
    link.send(&format!("HELLO {node}"))?;
    Ok((
        program,
        config,
        Workload {
            node_id: node,
            points,
        },
    ))
}

pub fn report_done(link: &mut dyn Link, report: &ExplorationReport) -> Result<(), DispatchError> {
    link.send("DONE")?;
    for line in encode_report(report) {
        link.send(&line)?;
    }
    Ok(())
}

/// Reads a worker's `DONE` message and report, then says `BYE`.
pub fn collect_done(link: &mut dyn Link, node: u32) -> Result<ExplorationReport, DispatchError> {
    let done = link.recv()?;
    if let Some(reason) = done.strip_prefix("FAILED ") {
        return Err(DispatchError::Worker {
            node,
            reason: reason.to_string(),
        });
    }
    if done != "DONE" {
        return Err(DispatchError::Unexpected {
            node,
            message: done,
        });
    }
    let summary = link.recv()?;
    let (_, count) = decode_summary(&summary, 1)?;
    let mut lines = vec![summary];
    for _ in 0..count {
        lines.push(link.recv()?);
    }
    let report = decode_report(&lines, node)?;
    link.send("BYE")?;
    Ok(report)
}

/// Serves one workload on `link`: explores it and reports back.
pub fn serve_worker(
    link: &mut dyn Link,
    resolve: &dyn Fn(&str) -> Option<ProgramHandle>,
) -> Result<ExplorationReport, CheckError> {
    let (name, config, workload) = receive_workload(link)?;
    let node = workload.node_id;
    let Some(program) = resolve(&name) else {
        let reason = format!("unknown program `{name}`");
        link.send(&format!("FAILED {reason}"))?;
        return Err(DispatchError::Worker { node, reason }.into());
    };
    let outcome = (|| {
        let mut explorer = Explorer::new(&program, &config, node)?;
        explorer.start_numbering_at(1);
        for point in workload.points {
            explorer.store_mut().insert(point)?;
        }
        explorer.drain()?;
        explorer.finish()
    })();
    match outcome {
        Ok(report) => {
            report_done(link, &report)?;
            let bye = link.recv()?;
            if bye != "BYE" {
                return Err(DispatchError::Unexpected { node, message: bye }.into());
            }
            Ok(report)
        }
        Err(e) => {
            let _ = link.send(&format!("FAILED {e}"));
            Err(e)
        }
    }
}

/// Accepts one master connection on `listener` and serves it.
pub fn serve_tcp(
    listener: &TcpListener,
    resolve: &dyn Fn(&str) -> Option<ProgramHandle>,
) -> Result<ExplorationReport, CheckError> {
    let (stream, _) = listener
        .accept()
        .map_err(|source| DispatchError::Connection { node: 0, source })?;
    let mut link = TcpLink::new(0, stream)?;
    serve_worker(&mut link, resolve)
}

/// Where the nodes other than the master run.
#[derive(Debug, Clone)]
pub enum Workers {
    /// `n - 1` worker threads in this process.
    InProcess(u32),
    /// One remote worker per address.
    Remote(Vec<String>),
}

impl Workers {
    pub fn node_count(&self) -> u32 {
        match self {
            Workers::InProcess(n) => (*n).max(1),
            Workers::Remote(addrs) => addrs.len() as u32 + 1,
        }
    }
}

/// Runs a full check on `node_count` nodes and writes the merged report.
pub fn check_distributed(
    program: &ProgramHandle,
    config: &ExplorationConfig,
    workers: &Workers,
) -> Result<ExplorationReport, CheckError> {
    config.validate()?;
    let nodes = workers.node_count();
    let mut master = Explorer::new(program, config, 0)?;
    let bound = master.bound();
    master.run_initial()?;
    let points = master.store_mut().drain_ordered();
    let mut loads = partition(points, nodes).into_iter();
    let own = loads.next().unwrap_or_default();
    for point in own.points {
        master.store_mut().insert(point)?;
    }

    let mut links: Vec<Box<dyn Link + Send>> = Vec::new();
    let mut local = Vec::new();
    for load in loads {
        let node = load.node_id;
        let mut link: Box<dyn Link + Send> = match workers {
            Workers::InProcess(_) => {
                let (master_end, mut worker_end) = memory_pair(node);
                let worker_program = program.clone();
                local.push(thread::spawn(move || {
                    let resolve = move |_: &str| Some(worker_program.clone());
                    serve_worker(&mut worker_end, &resolve)
                }));
                Box::new(master_end)
            }
            Workers::Remote(addrs) => {
                Box::new(TcpLink::connect(node, addrs[node as usize - 1].as_str())?)
            }
        };
        send_workload(link.as_mut(), program.name(), config, bound, &load)?;
        links.push(link);
    }

    master.drain()?;
    let mut report = master.finish()?;
    let mut statuses = vec![NodeStatus {
        node_id: 0,
        state: NodeState::Done,
        violations_so_far: report.violations.len(),
    }];
    for (i, link) in links.iter_mut().enumerate() {
        let node = i as u32 + 1;
        let worker_report = collect_done(link.as_mut(), node)?;
        if let Some(dir) = &config.out_dir {
            let tracer = Tracer::new(dir, node, false)?;
            for found in &worker_report.violations {
                write_trace(
                    &tracer.dir().join(found.file_name()),
                    &found.report.trace().steps,
                )?;
            }
        }
        statuses.push(NodeStatus {
            node_id: node,
            state: NodeState::Done,
            violations_so_far: worker_report.violations.len(),
        });
        report.merge(worker_report);
    }
    for handle in local {
        handle.join().map_err(|_| DispatchError::Worker {
            node: 0,
            reason: "worker thread panicked".into(),
        })??;
    }
    debug_assert!(statuses.iter().all(|s| s.state == NodeState::Done));
    report.normalize();
    if let Some(dir) = &config.out_dir {
        write_report(dir, &report.violations)?;
    }
    Ok(report)
}
