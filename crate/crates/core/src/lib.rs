//! Deterministic simulation of CPU-free, stream-triggered two-sided
//! messaging between GPU ranks.
//!
//! Everything runs on one discrete-event clock in virtual nanoseconds:
//! a triggered-operation NIC, in-order GPU streams, a host MPI layer with
//! permanent matching, and stream-triggered queues built on top of them.

pub mod costmodel;
pub mod error;
pub mod gpusim;
pub mod mpicore;
pub mod nicsim;
pub mod observe;
pub mod simclock;
pub mod stqueue;
pub mod world;

pub mod bench;

pub use costmodel::CostModel;
pub use error::{Error, Result};
pub use simclock::{DeadlockReport, Nanos, Outcome, Simulation};
pub use world::{cluster, Buffer, Host, World};
