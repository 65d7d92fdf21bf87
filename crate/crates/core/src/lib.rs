//! Deterministic simulator for distributed protocols, coupled in lock-step to
//! transition-system models.
//!
//! A run interleaves thread steps with network deliveries and drops under a
//! seeded scheduler, producing a finite execution trace. A coupling maps each
//! execution step to candidate model transitions; a step relation picks the
//! transition that keeps the pair of traces related, so model-level safety and
//! liveness checks apply to the concrete run. A separate explorer enumerates
//! model state spaces exhaustively.

pub mod explorer;
pub mod model;
pub mod netsem;
pub mod protocols;
pub mod refinement;
pub mod report;
pub mod scenario;
pub mod traces;

/// Runtime switch between the sequential and the data-parallel code paths.
/// With the `parallel` feature disabled, `Parallel` silently degrades to
/// sequential so callers need no cfg logic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Parallelism {
    pub fn effective_parallel(self) -> bool {
        match self {
            Parallelism::Sequential => false,
            Parallelism::Parallel => cfg!(feature = "parallel"),
        }
    }
}
