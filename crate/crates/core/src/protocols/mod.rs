//! Worked protocols: each submodule bundles a transition-system model, the
//! node programs that implement it, a coupling that matches machine steps to
//! model steps, the trace relation checked along coupled runs, and the
//! protocol-specific property checkers.

pub mod gcounter;
pub mod incr;
pub mod paxos;
pub mod tpc;
pub mod yesno;
