//! Input-bounded safety filters built on backup control barrier functions.
//!
//! The crate provides four safe controllers for control-affine plants
//!
//! ```text
//!     x' = f(x) + g(x) u,    u in U (axis-aligned box)
//! ```
//!
//! * a closed-form CBF filter for unbounded inputs,
//! * the backup-CBF quadratic program (bCBF-QP),
//! * function-based blending of a primary and a backup controller,
//! * the optimally interpolated (OI) controller, whose blending weight
//!   has the closed form `mu* = max_i lambda(a_i, b_i)`.
//!
//! Supporting machinery: fixed-step RK4 integration of the backup flow,
//! its full sensitivity matrix and the cheaper push-forward vectors, a small
//! dense active-set QP solver, two reference plants (a double integrator and
//! a fixed-wing aircraft with a geofence), a zero-order-hold simulation
//! harness and a scenario-driven CLI.

pub mod cli;
pub mod controllers;
pub mod error;
pub mod integrate;
pub mod models;
pub mod qp;
pub mod sim;
pub mod system;
pub mod verify;

pub use error::{Error, Result};
pub use system::{ClassK, ControlAffine, ControlVec, InputBox, SafetySpec, Scenario, StateVec};
