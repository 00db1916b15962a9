//! Built-in programs, addressable by name.

use crate::shadow::{join, register_shared, spawn, yield_now, ProgramHandle, ShadowMutex};

/// Names of every built-in program, in listing order.
pub const PROGRAMS: &[&str] = &[
    "data-race-flag",
    "data-race-flag-locked",
    "deadlock-two-mutexes",
    "livelock-philosophers",
    "spin-until-flag",
    "independent-writes",
    "dependent-writes",
    "single-thread",
];

pub fn lookup(name: &str) -> Option<ProgramHandle> {
    let program = match name {
        "data-race-flag" => data_race_flag(),
        "data-race-flag-locked" => data_race_flag_locked(),
        "deadlock-two-mutexes" => deadlock_two_mutexes(),
        "livelock-philosophers" => livelock_philosophers(),
        "spin-until-flag" => spin_until_flag(),
        "independent-writes" => independent_writes(),
        "dependent-writes" => dependent_writes(),
        "single-thread" => single_thread(),
        _ => return None,
    };
    Some(program)
}

/// One thread reads `flag` while another writes it, with no locking.
pub fn data_race_flag() -> ProgramHandle {
    ProgramHandle::new("data-race-flag", || {
        let flag = register_shared(0)?;
        let t1 = spawn(move || {
            if flag.read()? == 1 {
                // flag is set
            }
            Ok(())
        })?;
        let t2 = spawn(move || flag.write(0))?;
        join(t1)?;
        join(t2)
    })
    .with_partitions(vec![5, 2, 2])
}

pub fn data_race_flag_locked() -> ProgramHandle {
    ProgramHandle::new("data-race-flag-locked", || {
        let flag = register_shared(0)?;
        let m = ShadowMutex::new()?;
        let t1 = spawn(move || {
            m.lock()?;
            let _ = flag.read()?;
            m.unlock()
        })?;
        let t2 = spawn(move || {
            m.lock()?;
            flag.write(0)?;
            m.unlock()
        })?;
        join(t1)?;
        join(t2)
    })
    .with_partitions(vec![5, 4, 4])
}

/// Two threads take the same two mutexes in opposite order.
pub fn deadlock_two_mutexes() -> ProgramHandle {
    ProgramHandle::new("deadlock-two-mutexes", || {
        let counter = register_shared(0)?;
        let a = ShadowMutex::new()?;
        let b = ShadowMutex::new()?;
        let t1 = spawn(move || {
            a.lock()?;
            b.lock()?;
            counter.write(counter.read()? + 1)?;
            b.unlock()?;
            a.unlock()
        })?;
        let t2 = spawn(move || {
            b.lock()?;
            a.lock()?;
            counter.write(counter.read()? - 1)?;
            a.unlock()?;
            b.unlock()
        })?;
        join(t1)?;
        join(t2)
    })
    .with_partitions(vec![5, 7, 7])
}

/// Two philosophers: lock the left fork, try the right one, release the left
/// fork and retry when the right one is taken.
pub fn livelock_philosophers() -> ProgramHandle {
    ProgramHandle::new("livelock-philosophers", || {
        let forks = [ShadowMutex::new()?, ShadowMutex::new()?];
        let mut phils = Vec::new();
        for i in 0..2 {
            let left = forks[i];
            let right = forks[(i + 1) % 2];
            phils.push(spawn(move || {
                loop {
                    left.lock()?;
                    if right.try_lock()? {
                        break;
                    }
                    left.unlock()?;
                }
                // eat
                left.unlock()?;
                right.unlock()
            })?);
        }
        for p in phils {
            join(p)?;
        }
        Ok(())
    })
    .with_partitions(vec![5, 4, 4])
}

/// One thread spins on `flag`, yielding between reads, until another sets it.
pub fn spin_until_flag() -> ProgramHandle {
    ProgramHandle::new("spin-until-flag", || {
        let flag = register_shared(0)?;
        let spinner = spawn(move || {
            while flag.read()? == 0 {
                yield_now()?;
            }
            Ok(())
        })?;
        let setter = spawn(move || flag.write(1))?;
        join(spinner)?;
        join(setter)
    })
    .with_partitions(vec![5, 4, 2])
}

/// Two threads writing two different cells.
pub fn independent_writes() -> ProgramHandle {
    ProgramHandle::new("independent-writes", || {
        let x = register_shared(0)?;
        let y = register_shared(0)?;
        let t1 = spawn(move || x.write(1))?;
        let t2 = spawn(move || y.write(2))?;
        join(t1)?;
        join(t2)
    })
    .with_partitions(vec![5, 2, 2])
}

/// Two threads writing the same cell.
pub fn dependent_writes() -> ProgramHandle {
    ProgramHandle::new("dependent-writes", || {
        let x = register_shared(0)?;
        let t1 = spawn(move || x.write(1))?;
        let t2 = spawn(move || x.write(2))?;
        join(t1)?;
        join(t2)
    })
    .with_partitions(vec![5, 2, 2])
}

pub fn single_thread() -> ProgramHandle {
    ProgramHandle::new("single-thread", || {
        let x = register_shared(0)?;
        x.write(x.read()? + 1)
    })
    .with_partitions(vec![3])
}
