//! Completion and online tracking of under-reported spatio-temporal count
//! data.
//!
//! Counts are modeled as a 4-way update tensor (location × feature ×
//! update-index × generation date). Missing and under-reported entries are
//! completed with a regularized nonnegative low-rank factorization solved by
//! extrapolated prox-linear block coordinate descent, and the factorization
//! is tracked online as new loading dates stream in.

pub mod error;
pub mod eval;
pub mod events;
pub mod graph;
pub mod matrix;
pub mod online;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
