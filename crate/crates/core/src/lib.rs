//! Distributed KV-cache serving toolkit.
//!
//! - [`attention`]: exact blockwise attention partials and their aggregation.
//! - [`perfmodel`]: analytical layer-time / throughput model.
//! - [`scheduler`]: greedy debtor/creditor block placement planner.
//! - [`controlplane`]: global/per-instance manager protocol state machines.
//! - [`trace`]: synthetic workload traces.
//! - [`sim`]: deterministic discrete-event serving simulator.
//! - [`config`]: cluster configuration and snapshot files.

pub mod attention;
pub mod config;
pub mod controlplane;
pub mod perfmodel;
pub mod scheduler;
pub mod sim;
pub mod trace;
