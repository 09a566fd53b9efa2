//! Small-signal stability certificates for three-phase unbalanced,
//! droop-controlled inverter microgrids.
//!
//! The pipeline: parse a network ([`network_model`]), reduce it to one complex
//! admittance entry per inverter, build the real coefficient matrices, then
//! judge stability three ways: the pairwise closed-form conditions
//! ([`certificate`]), eigenvalues of the linearized model ([`reduced_model`]),
//! and time-domain simulation of the full dynamic-phasor model ([`simulator`]).
//! [`sweep`] searches droop space for stability boundaries.

pub mod certificate;
pub mod cli;
pub mod error;
pub mod network_model;
pub mod reduced_model;
pub mod simulator;
pub mod sweep;

pub use error::{GridError, Result};
