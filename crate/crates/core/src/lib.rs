//! Asymptotic-preserving solvers for a two-stream kinetic chemotaxis model
//! whose tumbling rate depends on an internal variable `y`.
//!
//! The building blocks are the kinetic schemes ([`ap_diff`], [`ap_hyp`]), the
//! macroscopic limit schemes ([`limit_solvers`]), a particle method
//! ([`monte_carlo`]) and the comparison tools in [`diagnostics`].

pub mod ap_diff;
pub mod ap_hyp;
pub mod cli_io;
pub mod diagnostics;
pub mod error;
pub mod limit_solvers;
pub mod model_core;
pub mod monte_carlo;
pub mod run;
pub mod steady;
pub mod sweep;

pub use error::{Error, Result};
