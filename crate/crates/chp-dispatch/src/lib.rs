//! Optimal dispatch for combined heat and power systems with variable mass
//! flow in the heating network.
//!
//! The heating network is modeled with an integer-free implicit pipeline
//! scheme; the resulting bilinear dispatch program is solved by a
//! decomposition into a convex sub-problem at fixed mass flow and a
//! gradient-based master search over the flow schedule with outer
//! approximation cuts. Fixed-flow and separate-dispatch baselines are
//! provided for comparison.

pub mod error;
pub mod harness;
pub mod io;
pub mod master;
pub mod model;
pub mod qp;
pub mod subproblem;
pub mod thermal;

pub mod testutil;

pub use error::{Error, Result};
