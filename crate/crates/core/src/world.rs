//! State of one execution's shadow objects and the messages program threads
//! send to the controller.

use std::sync::mpsc::Sender;

use crate::error::ShadowError;
use crate::model::{ObjectId, ThreadId, VisibleOp};
use crate::race::PendingKind;
use crate::registry::IdentityTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectState {
    Cell(i64),
    Mutex(Option<ThreadId>),
    Semaphore(u32),
    CondVar { signal_flag: u8, waiters: u32 },
}

impl ObjectState {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ObjectState::Cell(_) => "shared cell",
            ObjectState::Mutex(_) => "mutex",
            ObjectState::Semaphore(_) => "semaphore",
            ObjectState::CondVar { .. } => "condition variable",
        }
    }
}

/// What a waiting operation needs before its attempt can succeed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum WaitOn {
    Mutex(ObjectId),
    Semaphore(ObjectId),
    Join(ThreadId),
    Signal {
        cond: ObjectId,
        mutex: ObjectId,
    },
    /// Some step has completed after step number `after`.
    Progress {
        after: usize,
    },
    Immediate,
}

#[derive(Debug, Default)]
pub(crate) struct World {
    pub ids: IdentityTable,
    pub objects: Vec<ObjectState>,
    pub ended: Vec<bool>,
    /// Completed progress steps as of the latest grant.
    pub steps: usize,
}

impl World {
    pub fn ready(&self, wait: WaitOn) -> bool {
        match wait {
            WaitOn::Mutex(oid) => matches!(
                self.objects.get(oid.index()),
                Some(ObjectState::Mutex(None))
            ),
            WaitOn::Semaphore(oid) => {
                matches!(self.objects.get(oid.index()), Some(ObjectState::Semaphore(n)) if *n > 0)
            }
            WaitOn::Join(tid) => self.ended.get(tid.index()).copied().unwrap_or(false),
            WaitOn::Signal { cond, mutex } => {
                let signalled = matches!(
                    self.objects.get(cond.index()),
                    Some(ObjectState::CondVar { signal_flag: 1, .. })
                );
                signalled && self.ready(WaitOn::Mutex(mutex))
            }
            WaitOn::Progress { after } => self.steps > after,
            WaitOn::Immediate => true,
        }
    }

    pub fn object_mut(&mut self, oid: ObjectId) -> &mut ObjectState {
        &mut self.objects[oid.index()]
    }

    pub fn object(&self, oid: ObjectId) -> ObjectState {
        self.objects[oid.index()]
    }
}

pub(crate) enum Grant {
    Go,
    Abort,
}

pub(crate) enum Event {
    Created {
        child: ThreadId,
        permit: Sender<Grant>,
    },
    Announce {
        op: VisibleOp,
        wait: Option<WaitOn>,
    },
    Pass(ThreadId),
    Yield(ThreadId),
    End(ThreadId),
    NoDead,
    Registered {
        oid: ObjectId,
        monitored: bool,
    },
    Pending {
        oid: ObjectId,
        kind: PendingKind,
    },
    Complete {
        oid: ObjectId,
        kind: PendingKind,
    },
    Failed {
        tid: ThreadId,
        error: ShadowError,
    },
}
