//! Learning-based safety-stability-driven control.
//!
//! Online Gaussian-process learning of model error feeds uncertainty-robust
//! barrier (safety) and Lyapunov (tracking) constraints into a slack-weighted
//! quadratic program. The crate also ships a five-car connected cruise control
//! simulator used to exercise the controllers.

pub mod constraints;
pub mod controllers;
pub mod dynamics;
pub mod gp;
pub mod plant;
pub mod qp;
pub mod scenario;
