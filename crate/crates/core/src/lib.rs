//! Back-pressure tandem queues.
//!
//! Site `n` serves only while its queue is strictly longer than the queue at
//! site `n + 1`. The crate provides a coupled discrete-event simulator, TASEP
//! constructions used to bound the queue, exact solutions for small truncated
//! chains, estimators for the simulation output and a command-line driver.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod tasep;

pub use model::{Horizon, OrderRelation, QueueState, SystemConfig};
