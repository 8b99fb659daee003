//! Refereed delegation for small-scale ML training runs.
//!
//! A training job is replicated across independent trainers. Training is made
//! bitwise deterministic (fixed-order reductions, ported libm kernels, a
//! counter-based RNG), so honest trainers produce identical checkpoint
//! commitments and any disagreement is attributable. When commitments differ,
//! a referee narrows the dispute first to a single training step, then to a
//! single operator of that step's computational graph, and re-executes only
//! that operator to convict the lying side.
//!
//! Module map:
//! - [`detops`]: deterministic tensor operators and the RNG.
//! - [`graph`]: model text format, extended (forward + backward + update)
//!   graph construction, and single-step execution.
//! - [`commit`]: canonical hashing and Merkle commitments over step traces.
//! - [`trainer`]: the replicated worker: training loop, checkpoint store,
//!   targeted re-execution, and query answering.
//! - [`protocol`]: the referee, message framing, transcripts, and offline
//!   evidence verification.
//! - [`harness`]: scenario configs, fault injection, and reports.

pub mod commit;
pub mod detops;
pub mod graph;
pub mod harness;
pub mod protocol;
pub mod trainer;
