//! Trace-driven discrete-event simulator and policy library for
//! workflow-aware scheduling of multi-step agent inference on a GPU cluster.
//!
//! Modules map onto the system's mechanisms:
//!
//! * [`model`] — shared domain types and the event vocabulary
//! * [`aeg`] — execution-graph construction, pattern inference, reuse estimates
//! * [`cache`] — eviction policies, tool-aware TTL, the offline-optimal oracle
//! * [`scheduler`] — session routing, work stealing, migration
//! * [`fairness`] — urgency-proportional epoch allocation and preemption
//! * [`sim`] — the deterministic event loop tying policies together
//! * [`workload`] — trace-shaped workload generation
//! * [`trace`] — newline-delimited JSON event-log and access-trace formats

pub mod aeg;
pub mod cache;
pub mod config;
pub mod error;
pub mod fairness;
pub mod metrics;
pub mod model;
pub mod presets;
pub mod scheduler;
pub mod sim;
pub mod stats;
pub mod trace;
pub mod workload;

pub use error::SimError;
