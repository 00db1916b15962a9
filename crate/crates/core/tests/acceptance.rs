//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use oracle::{brute_force, check, count_interleavings, generate, AOp, AProg};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smcheck::dispatch::{check_distributed, Workers};
use smcheck::explorer::{default_bound, Explorer};
use smcheck::model::{AccessKind, Target, Token};
use smcheck::race::{PendingKind, RaceCounters, RaceDetector};
use smcheck::tracer::{replay, Found};
use smcheck::{
    corpus, explore, Ending, ExplorationConfig, ExplorationReport, ObjectId, RunConfig, ThreadId,
    ViolationKind,
};

const DEADLOCK_LIMIT: Duration = Duration::from_secs(5);
const RACE_LIMIT: Duration = Duration::from_secs(5);
const LIVELOCK_LIMIT: Duration = Duration::from_secs(10);
const ORACLE_LIMIT: Duration = Duration::from_secs(60);
const DISTRIBUTION_LIMIT: Duration = Duration::from_secs(30);
const ORACLE_PROGRAMS: usize = 200;
const ORACLE_SEED: u64 = 0x5eed;
const LIVELOCK_BOUND: usize = 25;
const RACE_CASES: u32 = 256;
const GOLDEN_DEADLOCK: &str = "1 0.\n2 0.\n3 1.\n4 2.\n";

type Outcome = Result<String, String>;
type Signature = BTreeSet<(ViolationKind, Vec<u32>)>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure!(took <= limit, "took {took:?}, limit {limit:?}");
    Ok(took)
}

fn steps(found: &Found) -> Vec<u32> {
    found.report.trace().steps.iter().map(|t| t.0).collect()
}

fn run(name: &str, config: ExplorationConfig) -> Result<ExplorationReport, String> {
    let program = corpus::lookup(name).ok_or_else(|| format!("no program {name}"))?;
    explore(&program, &config).map_err(|e| format!("{name}: {e}"))
}

fn count(report: &ExplorationReport, kind: ViolationKind) -> usize {
    report
        .violations
        .iter()
        .filter(|f| f.report.kind() == kind)
        .count()
}

/// Artifacts shared between criteria.
#[derive(Default)]
struct Shared {
    /// (program, bound, violation) for every violation from the first three criteria.
    violations: Vec<(&'static str, Option<usize>, Found)>,
    /// Trace directories written by the first two criteria.
    trace_dirs: Vec<PathBuf>,
}

fn out_config(dir: &Path) -> ExplorationConfig {
    ExplorationConfig {
        out_dir: Some(dir.to_path_buf()),
        ..ExplorationConfig::default()
    }
}

fn deadlock(shared: &mut Shared, tmp: &Path) -> Outcome {
    let started = Instant::now();
    let dir = tmp.join("deadlock");
    let dpor = run("deadlock-two-mutexes", out_config(&dir))?;
    let plain = run(
        "deadlock-two-mutexes",
        ExplorationConfig {
            dpor_enabled: false,
            ..ExplorationConfig::default()
        },
    )?;
    let took = within(started, DEADLOCK_LIMIT)?;
    ensure!(
        count(&dpor, ViolationKind::Deadlock) >= 1,
        "DPOR found no deadlock"
    );
    ensure!(
        count(&plain, ViolationKind::Deadlock) >= 1,
        "exhaustive mode found no deadlock"
    );
    ensure!(
        dpor.violations.iter().any(|f| steps(f) == [0, 0, 1, 2]),
        "no deadlock with schedule [0,0,1,2]: {:?}",
        dpor.violations.iter().map(steps).collect::<Vec<_>>()
    );
    ensure!(
        plain.iterations_run > dpor.iterations_run,
        "exhaustive {} iterations, DPOR {}",
        plain.iterations_run,
        dpor.iterations_run
    );
    for f in &dpor.violations {
        shared
            .violations
            .push(("deadlock-two-mutexes", None, f.clone()));
    }
    shared.trace_dirs.push(dir.join("traces"));
    Ok(format!(
        "deadlocks={} dpor_iterations={} exhaustive_iterations={} in {took:?}",
        count(&dpor, ViolationKind::Deadlock),
        dpor.iterations_run,
        plain.iterations_run
    ))
}

fn data_race(shared: &mut Shared, tmp: &Path) -> Outcome {
    let started = Instant::now();
    let dir = tmp.join("race");
    let racy = run("data-race-flag", out_config(&dir))?;
    let locked = run("data-race-flag-locked", ExplorationConfig::default())?;
    let took = within(started, RACE_LIMIT)?;
    // `flag` is the first object the program registers.
    let flag = ObjectId(0);
    let hit = racy.violations.iter().find_map(|f| {
        f.report
            .race_detail()
            .filter(|d| d.object == flag && d.readers_pending >= 1 && d.writers_pending >= 1)
    });
    let Some(detail) = hit else {
        return Err(format!("no race on flag: {:?}", racy.violations));
    };
    ensure!(
        count(&locked, ViolationKind::DataRace) == 0,
        "locked variant reported {} races",
        count(&locked, ViolationKind::DataRace)
    );
    for f in &racy.violations {
        shared.violations.push(("data-race-flag", None, f.clone()));
    }
    shared.trace_dirs.push(dir.join("traces"));
    Ok(format!(
        "race on object {} readers={} writers={}, locked variant clean, in {took:?}",
        detail.object, detail.readers_pending, detail.writers_pending
    ))
}

fn livelock(shared: &mut Shared, _tmp: &Path) -> Outcome {
    let started = Instant::now();
    let report = run(
        "livelock-philosophers",
        ExplorationConfig {
            bound: Some(LIVELOCK_BOUND),
            ..ExplorationConfig::default()
        },
    )?;
    let took = within(started, LIVELOCK_LIMIT)?;
    let livelocks: Vec<&Found> = report
        .violations
        .iter()
        .filter(|f| f.report.kind() == ViolationKind::Livelock)
        .collect();
    ensure!(
        !livelocks.is_empty(),
        "no livelock at bound {LIVELOCK_BOUND}"
    );
    for f in &livelocks {
        let len = f.report.trace().len();
        ensure!(
            len == LIVELOCK_BOUND || len == LIVELOCK_BOUND + 1,
            "livelock trace has {len} steps"
        );
    }
    // Each philosopher keeps taking its first fork and putting it back.
    let program = corpus::lookup("livelock-philosophers").expect("corpus");
    let config = RunConfig {
        bound: LIVELOCK_BOUND,
        ..RunConfig::default()
    };
    let cycling = livelocks.iter().any(|f| {
        let Ok(rep) = replay(&program, &f.report.trace().steps, &config) else {
            return false;
        };
        (1..=2u32).all(|p| {
            let first_fork = Target::Object(ObjectId(p - 1));
            let mine = |token: Token| {
                rep.ops
                    .iter()
                    .filter(|op| {
                        op.tid() == ThreadId(p)
                            && op.token() == token
                            && op.access() == AccessKind::Write
                            && op.target() == first_fork
                    })
                    .count()
            };
            mine(Token::Waiting) >= 2 && mine(Token::NonBlocking) >= 2
        })
    });
    ensure!(
        cycling,
        "no livelock trace shows both philosophers cycling on their first fork"
    );
    for f in &livelocks {
        shared
            .violations
            .push(("livelock-philosophers", Some(LIVELOCK_BOUND), (*f).clone()));
    }
    Ok(format!(
        "livelocks={} iterations={} in {took:?}",
        livelocks.len(),
        report.iterations_run
    ))
}

fn oracle_agreement(_: &mut Shared, _: &Path) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    let mut mismatches = Vec::new();
    for i in 0..ORACLE_PROGRAMS {
        let prog = generate(&mut rng);
        let (got, _) = check(&prog, true);
        let expected = brute_force(&prog);
        if got != expected {
            mismatches.push(format!(
                "#{i} {:?}: expected {expected:?} got {got:?}",
                prog.threads
            ));
        }
    }
    let took = within(started, ORACLE_LIMIT)?;
    ensure!(
        mismatches.is_empty(),
        "{} mismatches, first: {}",
        mismatches.len(),
        mismatches[0]
    );
    Ok(format!("{ORACLE_PROGRAMS} programs agree in {took:?}"))
}

fn reduction(_: &mut Shared, _: &Path) -> Outcome {
    let cases = [
        (
            "independent-writes",
            vec![vec![AOp::WriteConst(0, 1)], vec![AOp::WriteConst(1, 2)]],
            2,
            1,
        ),
        (
            "dependent-writes",
            vec![vec![AOp::WriteConst(0, 1)], vec![AOp::WriteConst(0, 2)]],
            2,
            2,
        ),
    ];
    let mut notes = Vec::new();
    for (name, threads, cells, dpor_expected) in cases {
        let prog = AProg {
            cells,
            mutex: false,
            threads,
        };
        let interleavings = count_interleavings(&prog);
        ensure!(
            interleavings == 2,
            "{name}: oracle counts {interleavings} interleavings"
        );
        let report = run(name, ExplorationConfig::default())?;
        ensure!(
            report.iterations_run == dpor_expected,
            "{name}: DPOR ran {} iterations, expected {dpor_expected}",
            report.iterations_run
        );
        notes.push(format!(
            "{name} dpor={} exhaustive={interleavings}",
            report.iterations_run
        ));
    }
    Ok(notes.join(", "))
}

fn replay_determinism(shared: &mut Shared, _: &Path) -> Outcome {
    ensure!(!shared.violations.is_empty(), "no violations to replay");
    for (name, bound, found) in &shared.violations {
        let program = corpus::lookup(name).expect("corpus");
        let config = RunConfig {
            bound: bound.unwrap_or_else(|| default_bound(&program)),
            ..RunConfig::default()
        };
        let trace = &found.report.trace().steps;
        let first = replay(&program, trace, &config).map_err(|e| format!("{name}: {e}"))?;
        let second = replay(&program, trace, &config).map_err(|e| format!("{name}: {e}"))?;
        ensure!(
            first.kinds().contains(&found.report.kind()),
            "{name} {}: replay reproduced {:?}",
            found.file_name(),
            first.kinds()
        );
        ensure!(
            first.op_log() == second.op_log(),
            "{name} {}: op logs differ",
            found.file_name()
        );
    }
    Ok(format!("{} violations reproduced", shared.violations.len()))
}

/// Independent reading of the trace grammar: `<index> <tid>.` lines,
/// indices counting up from 1, newline after every line.
fn well_formed(text: &str) -> Result<(), String> {
    ensure!(
        text.is_empty() || text.ends_with('\n'),
        "missing final newline"
    );
    for (i, line) in text.lines().enumerate() {
        let Some((index, rest)) = line.split_once(' ') else {
            return Err(format!("line {}: no separator", i + 1));
        };
        ensure!(
            index == (i + 1).to_string(),
            "line {}: index {index}",
            i + 1
        );
        let tid = rest
            .strip_suffix('.')
            .ok_or(format!("line {}: no terminator", i + 1))?;
        ensure!(
            !tid.is_empty() && tid.bytes().all(|b| b.is_ascii_digit()),
            "line {}: tid {tid:?}",
            i + 1
        );
    }
    Ok(())
}

fn trace_format(shared: &mut Shared, _: &Path) -> Outcome {
    let mut files = 0;
    let mut golden = false;
    for dir in &shared.trace_dirs {
        let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        for entry in entries {
            let path = entry.map_err(|e| e.to_string())?.path();
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            well_formed(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            golden |= text == GOLDEN_DEADLOCK;
            files += 1;
        }
    }
    ensure!(files > 0, "no trace files written");
    ensure!(golden, "no deadlock trace matches the golden file");
    Ok(format!(
        "{files} trace files well formed, golden deadlock present"
    ))
}

fn distribution(_: &mut Shared, _: &Path) -> Outcome {
    let started = Instant::now();
    for (name, bound) in [
        ("deadlock-two-mutexes", None),
        ("livelock-philosophers", Some(LIVELOCK_BOUND)),
    ] {
        let program = corpus::lookup(name).expect("corpus");
        let mut seen: Vec<(u32, Signature)> = Vec::new();
        for nodes in [1, 2, 4] {
            let config = ExplorationConfig {
                bound,
                node_count: nodes,
                ..ExplorationConfig::default()
            };
            let report = check_distributed(&program, &config, &Workers::InProcess(nodes))
                .map_err(|e| format!("{name} nodes={nodes}: {e}"))?;
            let set = report
                .violations
                .iter()
                .map(|f| (f.report.kind(), steps(f)))
                .collect();
            seen.push((nodes, set));
        }
        for (nodes, set) in &seen[1..] {
            ensure!(
                *set == seen[0].1,
                "{name}: {nodes} nodes found {} distinct violations, one node {}",
                set.len(),
                seen[0].1.len()
            );
        }
    }
    let took = within(started, DISTRIBUTION_LIMIT)?;
    Ok(format!("1, 2 and 4 nodes agree in {took:?}"))
}

fn fairness(_: &mut Shared, _: &Path) -> Outcome {
    let program = corpus::spin_until_flag();
    let config = ExplorationConfig::default();
    let mut endings: BTreeMap<String, u64> = BTreeMap::new();
    let mut starved = None;
    {
        let mut explorer = Explorer::new(&program, &config, 0).map_err(|e| e.to_string())?;
        explorer.observe(|iter, result| {
            *endings.entry(format!("{:?}", result.ending)).or_default() += 1;
            let threads = result
                .decisions
                .iter()
                .flat_map(|d| d.enabled.iter())
                .collect::<BTreeSet<_>>();
            let window = 2 * threads.len().max(1);
            if starved.is_none() {
                starved = starvation(&result.decisions, window).map(|(t, at)| (iter, t, at));
            }
        });
        explorer.run_initial().map_err(|e| e.to_string())?;
        explorer.drain().map_err(|e| e.to_string())?;
        explorer.finish().map_err(|e| e.to_string())?;
    }
    for bad in [Ending::BoundWarning, Ending::Livelock] {
        ensure!(
            !endings.contains_key(&format!("{bad:?}")),
            "{bad:?} endings: {endings:?}"
        );
    }
    if let Some((iter, tid, at)) = starved {
        return Err(format!(
            "iteration {iter}: thread {tid} enabled but not picked from decision {at}"
        ));
    }
    Ok(format!("endings {endings:?}"))
}

/// First thread that stays enabled for `window` consecutive decisions
/// without being picked.
fn starvation(
    decisions: &[smcheck::scheduler::DecisionRecord],
    window: usize,
) -> Option<(ThreadId, usize)> {
    if decisions.len() < window {
        return None;
    }
    for start in 0..=decisions.len() - window {
        let span = &decisions[start..start + window];
        let always: BTreeSet<ThreadId> = span
            .iter()
            .map(|d| d.enabled.clone())
            .reduce(|a, b| a.intersection(&b).copied().collect())
            .unwrap_or_default();
        if let Some(t) = always
            .into_iter()
            .find(|t| span.iter().all(|d| d.pick != *t))
        {
            return Some((t, start));
        }
    }
    None
}

#[derive(Debug, Clone)]
enum Step {
    Pending(u32, bool),
    Complete(u32, bool),
    Finish,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    prop_oneof![
        4 => (0..3u32, any::<bool>()).prop_map(|(o, w)| Step::Pending(o, w)),
        4 => (0..3u32, any::<bool>()).prop_map(|(o, w)| Step::Complete(o, w)),
        1 => Just(Step::Finish),
    ]
}

fn race_counters(_: &mut Shared, _: &Path) -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: RACE_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let result = runner.run(&prop::collection::vec(step_strategy(), 0..60), |steps| {
        let kind = |w: bool| {
            if w {
                PendingKind::Write
            } else {
                PendingKind::Read
            }
        };
        let mut detector = RaceDetector::new(false);
        let mut model: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
        let register = |d: &mut RaceDetector, m: &mut BTreeMap<u32, (u32, u32)>| {
            for o in 0..3 {
                d.on_register(ObjectId(o));
                m.insert(o, (0, 0));
            }
        };
        register(&mut detector, &mut model);
        for step in steps {
            match step {
                Step::Pending(o, w) => {
                    let c = model.get_mut(&o).expect("registered");
                    if w {
                        c.1 += 1
                    } else {
                        c.0 += 1
                    }
                    let verdict = detector
                        .on_pending(ObjectId(o), kind(w))
                        .expect("registered");
                    prop_assert_eq!(verdict.is_some(), c.0 > 0 && c.1 > 0);
                }
                Step::Complete(o, w) => {
                    let c = model.get_mut(&o).expect("registered");
                    let slot = if w { &mut c.1 } else { &mut c.0 };
                    let res = detector.on_complete(ObjectId(o), kind(w));
                    if *slot == 0 {
                        prop_assert!(res.is_err(), "underflow accepted");
                    } else {
                        *slot -= 1;
                        prop_assert!(res.is_ok());
                    }
                }
                Step::Finish => {
                    detector.on_finish();
                    prop_assert_eq!(detector.worker_count(), 0);
                    register(&mut detector, &mut model);
                }
            }
            for (o, (r, w)) in &model {
                prop_assert_eq!(
                    detector.counters(ObjectId(*o)),
                    Some(RaceCounters {
                        readers: *r,
                        writers: *w
                    })
                );
            }
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok(format!("{RACE_CASES} random access sequences"))
}

type Criterion = fn(&mut Shared, &Path) -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("deadlock detection", deadlock),
        ("data race detection", data_race),
        ("livelock detection", livelock),
        ("DPOR agrees with brute force", oracle_agreement),
        ("DPOR reduction", reduction),
        ("replay determinism", replay_determinism),
        ("trace file format", trace_format),
        ("distributed equivalence", distribution),
        ("fair scheduling", fairness),
        ("race counters", race_counters),
    ];
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        match criterion(&mut shared, tmp.path()) {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
