//! The API programs under test are written against.
//!
//! Every primitive here is a visible operation: the calling thread announces
//! it to the controller, gives up the processor, and only performs the effect
//! once it is granted a permit. Waiting primitives (lock, semaphore wait,
//! join, condition wait, yield) attempt their effect on each grant and report
//! `pass` or `yield`; a failed attempt changes nothing.
//!
//! Code between two primitives is thread-local and runs atomically with the
//! preceding visible operation.

use std::cell::RefCell;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use crate::error::ShadowError;
use crate::model::{make_visible_op, AccessKind, ObjectId, Target, ThreadId, Token, VisibleOp};
use crate::race::PendingKind;
use crate::registry::ObjectHandle;
use crate::world::{Event, Grant, ObjectState, WaitOn, World};

/// Body of a program thread.
pub type ThreadBody = Box<dyn FnOnce() -> Result<(), ShadowError> + Send + 'static>;

type Entry = Arc<dyn Fn() -> Result<(), ShadowError> + Send + Sync + 'static>;

/// A program the checker can execute any number of times.
///
/// The entry point is the main thread's body. It must behave identically
/// whenever it is scheduled identically: no randomness, clocks, or other
/// input that is not derived from shadow objects.
#[derive(Clone)]
pub struct ProgramHandle {
    name: String,
    entry: Entry,
    partitions: Vec<u32>,
}

impl ProgramHandle {
    pub fn new<F>(name: impl Into<String>, entry: F) -> Self
    where
        F: Fn() -> Result<(), ShadowError> + Send + Sync + 'static,
    {
        ProgramHandle {
            name: name.into(),
            entry: Arc::new(entry),
            partitions: Vec::new(),
        }
    }

    /// Declares how many partitions each thread is expected to run; used to
    /// derive a default depth bound.
    pub fn with_partitions(mut self, partitions: Vec<u32>) -> Self {
        self.partitions = partitions;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn partitions(&self) -> &[u32] {
        &self.partitions
    }

    pub(crate) fn entry(&self) -> Entry {
        Arc::clone(&self.entry)
    }
}

impl fmt::Debug for ProgramHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProgramHandle")
            .field("name", &self.name)
            .field("partitions", &self.partitions)
            .finish_non_exhaustive()
    }
}

/// Unwind payload used to tear down threads of a finished execution.
pub(crate) struct Aborted;

pub(crate) struct Shared {
    pub events: Mutex<Sender<Event>>,
    pub world: Mutex<World>,
    pub threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    pub fn send(&self, event: Event) {
        // The controller outlives every program thread of its execution.
        let _ = self
            .events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .send(event);
    }

    pub fn world(&self) -> MutexGuard<'_, World> {
        self.world.lock().unwrap_or_else(|e| e.into_inner())
    }
}

struct ThreadCtx {
    tid: ThreadId,
    shared: Arc<Shared>,
    permit: Receiver<Grant>,
    holds_permit: bool,
}

thread_local! {
    static CURRENT: RefCell<Option<ThreadCtx>> = const { RefCell::new(None) };
}

fn with_ctx<T>(f: impl FnOnce(&mut ThreadCtx) -> Result<T, ShadowError>) -> Result<T, ShadowError> {
    CURRENT.with(|cell| {
        let mut slot = cell.borrow_mut();
        let ctx = slot.as_mut().ok_or(ShadowError::NoExecution)?;
        f(ctx)
    })
}

impl ThreadCtx {
    fn op(&self, token: Token, access: AccessKind, target: Target) -> VisibleOp {
        make_visible_op(token, self.tid, access, target).expect("shadow ops are well-formed")
    }

    fn announce(&mut self, op: VisibleOp, wait: Option<WaitOn>) {
        self.holds_permit = false;
        self.shared.send(Event::Announce { op, wait });
    }

    fn await_grant(&mut self) {
        match self.permit.recv() {
            Ok(Grant::Go) => self.holds_permit = true,
            Ok(Grant::Abort) | Err(_) => panic::resume_unwind(Box::new(Aborted)),
        }
    }

    /// Announce, then block until granted.
    fn visible(&mut self, op: VisibleOp, wait: Option<WaitOn>) {
        self.announce(op, wait);
        self.await_grant();
    }

    /// The try-loop of a waiting operation: attempt on every grant, pass on
    /// success, yield and re-wait on failure.
    fn waiting<T>(
        &mut self,
        op: VisibleOp,
        wait: WaitOn,
        mut attempt: impl FnMut(&mut World) -> Option<T>,
    ) -> T {
        self.announce(op, Some(wait));
        loop {
            self.await_grant();
            let outcome = attempt(&mut self.shared.world());
            match outcome {
                Some(value) => {
                    self.shared.send(Event::Pass(self.tid));
                    return value;
                }
                None => {
                    self.holds_permit = false;
                    self.shared.send(Event::Yield(self.tid));
                }
            }
        }
    }

    fn require_permit(&self) -> Result<(), ShadowError> {
        if self.holds_permit {
            Ok(())
        } else {
            Err(ShadowError::CheckerStopped)
        }
    }

    fn resolve(&self, handle: ObjectHandle, kind: &'static str) -> Result<ObjectId, ShadowError> {
        let world = self.shared.world();
        let oid = world
            .ids
            .resolve(handle)
            .map_err(|_| ShadowError::Unregistered(handle.0))?;
        if world.object(oid).kind_name() != kind {
            return Err(ShadowError::WrongKind(oid, kind));
        }
        Ok(oid)
    }

    fn register(
        &mut self,
        state: ObjectState,
        monitored: bool,
    ) -> Result<(ObjectHandle, ObjectId), ShadowError> {
        self.require_permit()?;
        static NEXT_HANDLE: AtomicU64 = AtomicU64::new(1);
        let handle = ObjectHandle(NEXT_HANDLE.fetch_add(1, Ordering::Relaxed));
        let oid = {
            let mut world = self.shared.world();
            let oid = world
                .ids
                .register_object(handle)
                .map_err(|_| ShadowError::Unregistered(handle.0))?;
            world.objects.push(state);
            oid
        };
        self.shared.send(Event::Registered { oid, monitored });
        Ok((handle, oid))
    }
}

/// Runs a program thread: installs its context, runs the body and reports
/// how it ended. The main thread starts out holding the permit.
pub(crate) fn thread_main(
    tid: ThreadId,
    shared: Arc<Shared>,
    permit: Receiver<Grant>,
    body: ThreadBody,
    holds_permit: bool,
) {
    CURRENT.with(|cell| {
        *cell.borrow_mut() = Some(ThreadCtx {
            tid,
            shared: Arc::clone(&shared),
            permit,
            holds_permit,
        });
    });
    let result = panic::catch_unwind(AssertUnwindSafe(body));
    CURRENT.with(|cell| cell.borrow_mut().take());
    match result {
        Ok(Ok(())) => shared.send(Event::End(tid)),
        Ok(Err(error)) => shared.send(Event::Failed { tid, error }),
        Err(payload) if payload.is::<Aborted>() => {}
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "thread panicked".to_string());
            shared.send(Event::Failed {
                tid,
                error: ShadowError::Program(message),
            });
        }
    }
}

pub(crate) fn start_thread(
    tid: ThreadId,
    shared: &Arc<Shared>,
    body: ThreadBody,
    holds_permit: bool,
) -> Sender<Grant> {
    let (permit_tx, permit_rx) = mpsc::channel();
    let thread_shared = Arc::clone(shared);
    let handle = std::thread::Builder::new()
        .name(format!("smcheck-t{tid}"))
        .spawn(move || thread_main(tid, thread_shared, permit_rx, body, holds_permit))
        .expect("failed to start program thread");
    shared
        .threads
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .push(handle);
    permit_tx
}

/// Identity of the calling program thread.
pub fn current_tid() -> Result<ThreadId, ShadowError> {
    with_ctx(|ctx| Ok(ctx.tid))
}

/// Starts a new program thread and returns its identity.
///
/// The spawn is a non-blocking visible operation `{n, tid, dc, dc}` of the
/// caller; the child is created once the caller is granted.
pub fn spawn<F>(body: F) -> Result<ThreadId, ShadowError>
where
    F: FnOnce() -> Result<(), ShadowError> + Send + 'static,
{
    with_ctx(|ctx| {
        ctx.require_permit()?;
        let op = ctx.op(Token::NonBlocking, AccessKind::DontCare, Target::DontCare);
        ctx.visible(op, None);
        let child = {
            let mut world = ctx.shared.world();
            let child = world.ids.register_thread();
            world.ended.push(false);
            child
        };
        let (permit_tx, permit_rx) = mpsc::channel();
        ctx.shared.send(Event::Created {
            child,
            permit: permit_tx,
        });
        let thread_shared = Arc::clone(&ctx.shared);
        let handle = std::thread::Builder::new()
            .name(format!("smcheck-t{child}"))
            .spawn(move || thread_main(child, thread_shared, permit_rx, Box::new(body), false))
            .expect("failed to start program thread");
        ctx.shared
            .threads
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(handle);
        Ok(child)
    })
}

/// Waits until `target` has finished.
pub fn join(target: ThreadId) -> Result<(), ShadowError> {
    with_ctx(|ctx| {
        if target == ctx.tid {
            return Err(ShadowError::JoinSelf(target));
        }
        if target.index() >= ctx.shared.world().ended.len() {
            return Err(ShadowError::UnknownThread(target));
        }
        let op = ctx.op(Token::Waiting, AccessKind::DontCare, Target::DontCare);
        ctx.waiting(op, WaitOn::Join(target), |world| {
            world.ended[target.index()].then_some(())
        });
        Ok(())
    })
}

/// Gives other threads a chance to run. The caller is not picked again until
/// some other step has made progress.
pub fn yield_now() -> Result<(), ShadowError> {
    with_ctx(|ctx| {
        let after = ctx.shared.world().steps + 1;
        let op = ctx.op(Token::Waiting, AccessKind::DontCare, Target::DontCare);
        ctx.waiting(op, WaitOn::Progress { after }, |world| {
            (world.steps > after).then_some(())
        });
        Ok(())
    })
}

/// A shared integer whose reads and writes are visible operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedCell {
    handle: ObjectHandle,
    oid: ObjectId,
}

impl SharedCell {
    /// Registers a new shared cell. Must be called while holding the permit.
    pub fn register(initial: i64) -> Result<SharedCell, ShadowError> {
        with_ctx(|ctx| {
            let (handle, oid) = ctx.register(ObjectState::Cell(initial), true)?;
            Ok(SharedCell { handle, oid })
        })
    }

    pub fn oid(&self) -> ObjectId {
        self.oid
    }

    pub fn read(&self) -> Result<i64, ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "shared cell")?;
            ctx.shared.send(Event::Pending {
                oid,
                kind: PendingKind::Read,
            });
            let op = ctx.op(Token::NonBlocking, AccessKind::Read, Target::Object(oid));
            ctx.visible(op, None);
            let value = match ctx.shared.world().object(oid) {
                ObjectState::Cell(v) => v,
                _ => unreachable!("kind checked on resolve"),
            };
            ctx.shared.send(Event::Complete {
                oid,
                kind: PendingKind::Read,
            });
            Ok(value)
        })
    }

    pub fn write(&self, value: i64) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "shared cell")?;
            ctx.shared.send(Event::Pending {
                oid,
                kind: PendingKind::Write,
            });
            let op = ctx.op(Token::NonBlocking, AccessKind::Write, Target::Object(oid));
            ctx.visible(op, None);
            *ctx.shared.world().object_mut(oid) = ObjectState::Cell(value);
            ctx.shared.send(Event::Complete {
                oid,
                kind: PendingKind::Write,
            });
            Ok(())
        })
    }
}

/// Shorthand for [`SharedCell::register`].
pub fn register_shared(initial: i64) -> Result<SharedCell, ShadowError> {
    SharedCell::register(initial)
}

/// A non-recursive mutex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowMutex {
    handle: ObjectHandle,
    oid: ObjectId,
}

impl ShadowMutex {
    pub fn new() -> Result<ShadowMutex, ShadowError> {
        with_ctx(|ctx| {
            let (handle, oid) = ctx.register(ObjectState::Mutex(None), false)?;
            Ok(ShadowMutex { handle, oid })
        })
    }

    pub fn oid(&self) -> ObjectId {
        self.oid
    }

    fn holder(ctx: &ThreadCtx, oid: ObjectId) -> Option<ThreadId> {
        match ctx.shared.world().object(oid) {
            ObjectState::Mutex(holder) => holder,
            _ => None,
        }
    }

    pub fn lock(&self) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "mutex")?;
            let me = ctx.tid;
            if Self::holder(ctx, oid) == Some(me) {
                return Err(ShadowError::Relock(me, oid));
            }
            let op = ctx.op(Token::Waiting, AccessKind::Write, Target::Object(oid));
            ctx.waiting(op, WaitOn::Mutex(oid), |world| {
                match world.object_mut(oid) {
                    ObjectState::Mutex(holder @ None) => {
                        *holder = Some(me);
                        Some(())
                    }
                    _ => None,
                }
            });
            Ok(())
        })
    }

    /// Non-blocking acquisition attempt; returns whether the lock was taken.
    pub fn try_lock(&self) -> Result<bool, ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "mutex")?;
            let me = ctx.tid;
            if Self::holder(ctx, oid) == Some(me) {
                return Err(ShadowError::Relock(me, oid));
            }
            let op = ctx.op(Token::NonBlocking, AccessKind::Write, Target::Object(oid));
            ctx.visible(op, None);
            let mut world = ctx.shared.world();
            Ok(match world.object_mut(oid) {
                ObjectState::Mutex(holder @ None) => {
                    *holder = Some(me);
                    true
                }
                _ => false,
            })
        })
    }

    pub fn unlock(&self) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "mutex")?;
            let me = ctx.tid;
            if Self::holder(ctx, oid) != Some(me) {
                return Err(ShadowError::NotHolder(me, oid));
            }
            let op = ctx.op(Token::NonBlocking, AccessKind::Write, Target::Object(oid));
            ctx.visible(op, None);
            *ctx.shared.world().object_mut(oid) = ObjectState::Mutex(None);
            Ok(())
        })
    }
}

/// A counting semaphore.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowSemaphore {
    handle: ObjectHandle,
    oid: ObjectId,
}

impl ShadowSemaphore {
    pub fn new(count: u32) -> Result<ShadowSemaphore, ShadowError> {
        with_ctx(|ctx| {
            let (handle, oid) = ctx.register(ObjectState::Semaphore(count), false)?;
            Ok(ShadowSemaphore { handle, oid })
        })
    }

    pub fn oid(&self) -> ObjectId {
        self.oid
    }

    pub fn wait(&self) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "semaphore")?;
            let op = ctx.op(Token::Waiting, AccessKind::Write, Target::Object(oid));
            ctx.waiting(op, WaitOn::Semaphore(oid), |world| {
                match world.object_mut(oid) {
                    ObjectState::Semaphore(count) if *count > 0 => {
                        *count -= 1;
                        Some(())
                    }
                    _ => None,
                }
            });
            Ok(())
        })
    }

    pub fn post(&self) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let oid = ctx.resolve(self.handle, "semaphore")?;
            let op = ctx.op(Token::NonBlocking, AccessKind::Write, Target::Object(oid));
            ctx.visible(op, None);
            if let ObjectState::Semaphore(count) = ctx.shared.world().object_mut(oid) {
                *count += 1;
            }
            Ok(())
        })
    }
}

/// A condition variable emulated by a signal flag and a waiter count.
///
/// A signal with no waiters is lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowCondVar {
    handle: ObjectHandle,
    oid: ObjectId,
}

impl ShadowCondVar {
    pub fn new() -> Result<ShadowCondVar, ShadowError> {
        with_ctx(|ctx| {
            let state = ObjectState::CondVar {
                signal_flag: 0,
                waiters: 0,
            };
            let (handle, oid) = ctx.register(state, false)?;
            Ok(ShadowCondVar { handle, oid })
        })
    }

    pub fn oid(&self) -> ObjectId {
        self.oid
    }

    /// Waits for a signal. The caller must hold `mutex`, which is released
    /// while waiting and held again on return.
    pub fn wait(&self, mutex: &ShadowMutex) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let cond = ctx.resolve(self.handle, "condition variable")?;
            let m = ctx.resolve(mutex.handle, "mutex")?;
            let me = ctx.tid;
            if ShadowMutex::holder(ctx, m) != Some(me) {
                return Err(ShadowError::NotHolder(me, m));
            }
            ctx.require_permit()?;
            let op = ctx.op(Token::Waiting, AccessKind::Write, Target::Object(cond));
            let fast = {
                let mut world = ctx.shared.world();
                match world.object_mut(cond) {
                    ObjectState::CondVar {
                        signal_flag: flag @ 1,
                        waiters,
                    } if *waiters > 0 => {
                        *flag = 0;
                        true
                    }
                    _ => false,
                }
            };
            if fast {
                // a signal was already pending: consume it, keep the mutex
                ctx.waiting(op, WaitOn::Immediate, |_| Some(()));
                return Ok(());
            }
            {
                let mut world = ctx.shared.world();
                *world.object_mut(m) = ObjectState::Mutex(None);
                if let ObjectState::CondVar { waiters, .. } = world.object_mut(cond) {
                    *waiters += 1;
                }
            }
            ctx.shared.send(Event::NoDead);
            ctx.waiting(op, WaitOn::Signal { cond, mutex: m }, |world| {
                let signalled = matches!(
                    world.object(cond),
                    ObjectState::CondVar { signal_flag: 1, .. }
                );
                if !signalled || world.object(m) != ObjectState::Mutex(None) {
                    return None;
                }
                *world.object_mut(m) = ObjectState::Mutex(Some(me));
                if let ObjectState::CondVar {
                    signal_flag,
                    waiters,
                } = world.object_mut(cond)
                {
                    *waiters -= 1;
                    *signal_flag = 0;
                }
                Some(())
            });
            Ok(())
        })
    }

    /// Sets the signal flag if anybody is waiting.
    pub fn signal(&self) -> Result<(), ShadowError> {
        with_ctx(|ctx| {
            let cond = ctx.resolve(self.handle, "condition variable")?;
            let op = ctx.op(Token::NonBlocking, AccessKind::Write, Target::Object(cond));
            ctx.visible(op, None);
            if let ObjectState::CondVar {
                signal_flag,
                waiters,
            } = ctx.shared.world().object_mut(cond)
            {
                if *waiters > 0 {
                    *signal_flag = 1;
                }
            }
            Ok(())
        })
    }
}
