//! Data-driven modelling and control of a drag-free satellite.
//!
//! The crate simulates the nonlinear satellite / MOSA / test-mass dynamics,
//! generates excitation datasets, identifies lifted linear (Koopman) models
//! with sequential thresholded least squares, and drives test-mass capture
//! with a box-constrained linear MPC on the identified model.

pub mod config;
pub mod dataset;
pub mod dictionary;
pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod mpc;
pub mod parallel;
pub mod pipeline;
pub mod qp;
pub mod sindy;

pub use error::{Error, Result};
