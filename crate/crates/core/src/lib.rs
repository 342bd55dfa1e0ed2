//! Online feedback optimization (OFO) for distribution-grid setpoint control
//! with an online, Kalman-filtered estimate of the input-output sensitivity.
//!
//! The crate is split along the closed loop:
//!
//! * [`plant`] solves the nonlinear feeder power flow `y = h(u, d)`.
//! * [`estimator`] learns `H = ∇_u h` from measured `(Δu, Δy)` pairs.
//! * [`controller`] performs the projected-gradient step with excitation.
//! * [`oracle`] computes the AC-OPF optimum the controller should track.
//! * [`scenario`], [`profiles`], [`sim`] and [`export`] run and record experiments.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod estimator;
pub mod export;
pub mod feeder;
pub mod oracle;
pub mod plant;
pub mod profiles;
pub mod scenario;
pub mod sim;

pub use error::{OfoError, Result};
