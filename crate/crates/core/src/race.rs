//! Pending-access race detection.
//!
//! A master routes access notifications to one worker per registered shared
//! cell. Each worker counts threads that announced a read or a write on its
//! object and have not finished it yet; a reader and a writer pending at the
//! same time is a race. Counters are checked when they are incremented, never
//! when they are decremented.

use std::collections::BTreeMap;

use crate::error::RaceError;
use crate::model::{ObjectId, RaceDetail};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PendingKind {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaceVerdict {
    Race,
    NoRace,
}

/// Race iff at least one writer and at least one reader are pending.
pub fn check(readers: u32, writers: u32) -> RaceVerdict {
    if writers > 0 && readers > 0 {
        RaceVerdict::Race
    } else {
        RaceVerdict::NoRace
    }
}

/// Writer/writer overlap, only reported in strict mode.
fn check_strict(readers: u32, writers: u32) -> RaceVerdict {
    if writers >= 2 {
        RaceVerdict::Race
    } else {
        check(readers, writers)
    }
}

/// Per-object pending counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RaceCounters {
    pub readers: u32,
    pub writers: u32,
}

#[derive(Debug, Default)]
struct Worker {
    counters: RaceCounters,
}

impl Worker {
    fn pending(&mut self, kind: PendingKind, strict: bool) -> RaceVerdict {
        match kind {
            PendingKind::Read => self.counters.readers += 1,
            PendingKind::Write => self.counters.writers += 1,
        }
        let RaceCounters { readers, writers } = self.counters;
        if strict {
            check_strict(readers, writers)
        } else {
            check(readers, writers)
        }
    }

    fn complete(&mut self, kind: PendingKind) -> Result<(), ()> {
        let slot = match kind {
            PendingKind::Read => &mut self.counters.readers,
            PendingKind::Write => &mut self.counters.writers,
        };
        *slot = slot.checked_sub(1).ok_or(())?;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct RaceDetector {
    workers: BTreeMap<ObjectId, Worker>,
    strict: bool,
}

impl RaceDetector {
    pub fn new(strict: bool) -> Self {
        RaceDetector {
            workers: BTreeMap::new(),
            strict,
        }
    }

    pub fn on_register(&mut self, oid: ObjectId) {
        self.workers.insert(oid, Worker::default());
    }

    /// Records a pending access and reports the counters if they now race.
    pub fn on_pending(
        &mut self,
        oid: ObjectId,
        kind: PendingKind,
    ) -> Result<Option<RaceDetail>, RaceError> {
        let strict = self.strict;
        let worker = self
            .workers
            .get_mut(&oid)
            .ok_or(RaceError::UnknownObject(oid))?;
        Ok(match worker.pending(kind, strict) {
            RaceVerdict::Race => Some(RaceDetail {
                object: oid,
                readers_pending: worker.counters.readers,
                writers_pending: worker.counters.writers,
            }),
            RaceVerdict::NoRace => None,
        })
    }

    pub fn on_complete(&mut self, oid: ObjectId, kind: PendingKind) -> Result<(), RaceError> {
        let worker = self
            .workers
            .get_mut(&oid)
            .ok_or(RaceError::UnknownObject(oid))?;
        worker
            .complete(kind)
            .map_err(|()| RaceError::Underflow(oid))
    }

    /// Drops every worker; the next execution registers objects afresh.
    pub fn on_finish(&mut self) {
        self.workers.clear();
    }

    pub fn counters(&self, oid: ObjectId) -> Option<RaceCounters> {
        self.workers.get(&oid).map(|w| w.counters)
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }
}
