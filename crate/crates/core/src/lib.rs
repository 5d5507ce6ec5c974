//! Rotation synchronization by low-rank and sparse matrix decomposition.

pub mod lowrank;
pub mod so3;
pub mod sync;
pub mod eval;
pub mod synth;
pub mod io;
