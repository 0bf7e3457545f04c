//! Spectral-Galerkin simulation and large-deviation toolkit for the
//! two-dimensional stochastic second-grade fluid driven by Brownian and
//! Poisson noise on the periodic torus.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod config;
pub mod controls;
pub mod error;
pub mod field_io;
pub mod integrator;
pub mod ldp;
pub mod mc;
pub mod skeleton;
pub mod spectral;
pub mod stochastic;
pub mod studies;
pub mod verify;

pub use error::{Error, Result};
