//! Quantum state ptychography: simulate single-basis measurements of a pure
//! state through overlapping probe projectors, then recover the state with
//! the ptychographic iterative engine (PIE).

pub mod error;
pub mod experiments;
pub mod measurement;
pub mod pie;
pub mod probes;
pub mod qcore;

pub use error::{Error, Result};
