//! Small random programs and a brute-force interleaving enumerator that is
//! independent of the checker.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::Rng;
use smcheck::explorer::Explorer;
use smcheck::{
    join, register_shared, spawn, Ending, ExplorationConfig, ProgramHandle, ShadowMutex,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AOp {
    /// Load the cell into the thread's local.
    Read(usize),
    /// Store a constant.
    WriteConst(usize, i64),
    /// Store the local plus a constant.
    WriteLocal(usize, i64),
    Lock,
    Unlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AProg {
    pub cells: usize,
    pub mutex: bool,
    pub threads: Vec<Vec<AOp>>,
}

pub fn generate(rng: &mut impl Rng) -> AProg {
    let cells = rng.gen_range(1..=3);
    let mutex = rng.gen_bool(0.5);
    let n = rng.gen_range(2..=3);
    let mut threads = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(1..=4);
        let mut holding = false;
        let mut ops = Vec::new();
        while ops.len() < len {
            let c = rng.gen_range(0..cells);
            let op = match rng.gen_range(0..5) {
                0 | 1 => AOp::Read(c),
                2 => AOp::WriteConst(c, rng.gen_range(1..=3)),
                3 => AOp::WriteLocal(c, rng.gen_range(1..=2)),
                _ if mutex && !holding => {
                    holding = true;
                    AOp::Lock
                }
                _ if mutex => {
                    holding = false;
                    AOp::Unlock
                }
                _ => AOp::Read(c),
            };
            ops.push(op);
        }
        threads.push(ops);
    }
    AProg {
        cells,
        mutex,
        threads,
    }
}

/// Terminal states (cell values, deadlocked?) and violation kinds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    pub terminals: BTreeSet<(Vec<i64>, bool)>,
    pub deadlock: bool,
    pub race: bool,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    pc: Vec<usize>,
    local: Vec<i64>,
    cells: Vec<i64>,
    holder: Option<usize>,
}

fn next(prog: &AProg, s: &State, t: usize) -> Option<AOp> {
    prog.threads[t].get(s.pc[t]).copied()
}

/// Explores every interleaving of the threads' operations.
pub fn brute_force(prog: &AProg) -> Outcome {
    let n = prog.threads.len();
    let start = State {
        pc: vec![0; n],
        local: vec![0; n],
        cells: vec![0; prog.cells],
        holder: None,
    };
    let mut out = Outcome::default();
    let mut seen = HashSet::new();
    let mut stack = vec![start];
    while let Some(s) = stack.pop() {
        if !seen.insert(s.clone()) {
            continue;
        }
        let pending: Vec<(usize, AOp)> = (0..n)
            .filter_map(|t| next(prog, &s, t).map(|op| (t, op)))
            .collect();
        let reads: Vec<usize> = pending
            .iter()
            .filter_map(|(t, op)| matches!(op, AOp::Read(_)).then_some(*t))
            .collect();
        for (t, op) in &pending {
            let written = match op {
                AOp::WriteConst(c, _) | AOp::WriteLocal(c, _) => *c,
                _ => continue,
            };
            for r in &reads {
                if r != t
                    && pending[pending.iter().position(|(u, _)| u == r).unwrap()].1
                        == AOp::Read(written)
                {
                    out.race = true;
                }
            }
        }
        let mut moved = false;
        for &(t, op) in &pending {
            let mut s2 = s.clone();
            match op {
                AOp::Read(c) => s2.local[t] = s.cells[c],
                AOp::WriteConst(c, v) => s2.cells[c] = v,
                AOp::WriteLocal(c, k) => s2.cells[c] = s.local[t] + k,
                AOp::Lock => {
                    if s.holder.is_some() {
                        continue;
                    }
                    s2.holder = Some(t);
                }
                AOp::Unlock => s2.holder = None,
            }
            s2.pc[t] += 1;
            moved = true;
            stack.push(s2);
        }
        if !moved {
            let deadlocked = !pending.is_empty();
            out.deadlock |= deadlocked;
            out.terminals.insert((s.cells.clone(), deadlocked));
        }
    }
    out
}

/// The same program written against the shadow API. Main registers the
/// cells and the mutex, starts every thread, then joins them in order.
pub fn to_program(prog: &AProg) -> ProgramHandle {
    let prog = Arc::new(prog.clone());
    ProgramHandle::new("oracle", move || {
        let cells = (0..prog.cells)
            .map(|_| register_shared(0))
            .collect::<Result<Vec<_>, _>>()?;
        let mutex = if prog.mutex {
            Some(ShadowMutex::new()?)
        } else {
            None
        };
        let mut tids = Vec::new();
        for ops in prog.threads.clone() {
            let cells = cells.clone();
            tids.push(spawn(move || {
                let mut local = 0;
                for op in ops {
                    match op {
                        AOp::Read(c) => local = cells[c].read()?,
                        AOp::WriteConst(c, v) => cells[c].write(v)?,
                        AOp::WriteLocal(c, k) => cells[c].write(local + k)?,
                        AOp::Lock => mutex.expect("generated with a mutex").lock()?,
                        AOp::Unlock => mutex.expect("generated with a mutex").unlock()?,
                    }
                }
                Ok(())
            })?);
        }
        for t in tids {
            join(t)?;
        }
        Ok(())
    })
}

/// Explores the program with the checker and collects the same observations.
pub fn check(prog: &AProg, dpor: bool) -> (Outcome, u64) {
    let program = to_program(prog);
    let config = ExplorationConfig {
        bound: Some(200),
        dpor_enabled: dpor,
        ..ExplorationConfig::default()
    };
    let mut terminals = BTreeSet::new();
    let mut explorer = Explorer::new(&program, &config, 0).expect("valid config");
    explorer.observe(|_, result| {
        assert!(
            matches!(result.ending, Ending::NormalEnd | Ending::Deadlock),
            "unexpected ending {:?}",
            result.ending
        );
        terminals.insert((result.cell_values(), result.ending == Ending::Deadlock));
    });
    explorer.run_initial().expect("iteration 0");
    explorer.drain().expect("exploration");
    let report = explorer.finish().expect("finish");
    let kinds: BTreeSet<_> = report.violations.iter().map(|f| f.report.kind()).collect();
    let outcome = Outcome {
        terminals,
        deadlock: kinds.contains(&smcheck::ViolationKind::Deadlock),
        race: kinds.contains(&smcheck::ViolationKind::DataRace),
    };
    (outcome, report.iterations_run)
}

/// Number of distinct complete interleavings of the threads' operations,
/// counting deadlocked prefixes as complete.
pub fn count_interleavings(prog: &AProg) -> u64 {
    fn go(prog: &AProg, s: &State) -> u64 {
        let n = prog.threads.len();
        let mut total = 0;
        for t in 0..n {
            let Some(op) = next(prog, s, t) else { continue };
            let mut s2 = s.clone();
            match op {
                AOp::Lock if s.holder.is_some() => continue,
                AOp::Lock => s2.holder = Some(t),
                AOp::Unlock => s2.holder = None,
                AOp::Read(c) => s2.local[t] = s.cells[c],
                AOp::WriteConst(c, v) => s2.cells[c] = v,
                AOp::WriteLocal(c, k) => s2.cells[c] = s.local[t] + k,
            }
            s2.pc[t] += 1;
            total += go(prog, &s2);
        }
        total.max(1)
    }
    let n = prog.threads.len();
    go(
        prog,
        &State {
            pc: vec![0; n],
            local: vec![0; n],
            cells: vec![0; prog.cells],
            holder: None,
        },
    )
}
