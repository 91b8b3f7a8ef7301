//! Quantum state verification from sequences of measured observables.
//!
//! The crate covers Hermitian operator algebra, compatible-set semidefinite
//! programs, observable-sequence planning, sequential and adaptive
//! verification, and the Monte Carlo experiment harness.

pub mod adaptive;
pub mod error;
pub mod experiment;
pub mod hermitian;
pub mod par;
pub mod planner;
pub mod sdp;
pub mod verifier;

pub use error::{QsvError, Result};
