//! Stateless model checking of multithreaded programs.
//!
//! Programs are written against the [`shadow`] API and executed many times
//! under a controlled scheduler. Each execution follows a different
//! interleaving of visible operations, chosen by dynamic partial-order
//! reduction, and is checked for deadlocks, livelocks and data races.

pub mod corpus;
pub mod dispatch;
pub mod dpor;
pub mod error;
pub mod explorer;
pub mod model;
pub mod race;
pub mod registry;
pub mod runtime;
pub mod scheduler;
pub mod shadow;
pub mod tracer;
mod world;

pub use error::{CheckError, ShadowError};
pub use explorer::{explore, ExplorationConfig, ExplorationReport};
pub use model::{ObjectId, ThreadId, Trace, ViolationKind, ViolationReport, VisibleOp};
pub use runtime::{run_execution, Ending, ExecutionResult, Plan, RunConfig};
pub use shadow::{
    join, register_shared, spawn, yield_now, ProgramHandle, ShadowCondVar, ShadowMutex,
    ShadowSemaphore, SharedCell,
};
pub use world::ObjectState;
