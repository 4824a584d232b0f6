//! Spike variations, adjoint equations and maximum-principle checks for
//! one-dimensional controlled jump diffusions driven by a Brownian motion and
//! a finite-activity Poisson random measure.

pub mod adjoint;
pub mod benchmarks;
pub mod calculus;
pub mod driver;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod maximum_principle;
pub mod problem;
pub mod report;
pub mod rng;
pub mod stats;
pub mod variation;

pub use error::{Error, Result};
