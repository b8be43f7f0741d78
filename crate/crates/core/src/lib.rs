//! Calibration of interaction-force models for systems of interacting agents.
//!
//! The library covers the full loop from raw trajectory CSVs to calibrated
//! force parameters:
//!
//! * [`nn`] — small dense feed-forward networks (softplus hidden layers) used
//!   as learnable pairwise force/velocity laws, with exact input Jacobians and
//!   weight gradients.
//! * [`forces`] — closed-form force laws: the optimal-velocity traffic law and
//!   the pedestrian social-force model (pairwise, wall, and relaxation terms),
//!   each with analytic derivatives.
//! * [`dynamics`] — assembles the per-model ODE right-hand sides (first-order
//!   traffic following, second-order crowd dynamics) and integrates them with
//!   the explicit Euler scheme.
//! * [`adjoint`] — tracking cost against reference trajectories and its exact
//!   reduced gradient via the discrete adjoint of the Euler scheme, plus a
//!   finite-difference cross-check.
//! * [`optim`] — projected ADADELTA with annealed Gaussian gradient noise and
//!   the mini-batch calibration driver.
//! * [`data`] — trajectory CSV ingestion, grid interpolation, sequence
//!   extraction for both model families, and synthetic dataset generation.

pub mod adjoint;
pub mod data;
pub mod dynamics;
mod error;
pub mod forces;
pub mod nn;
pub mod optim;
pub mod vec2;

pub use error::{Error, Result};
