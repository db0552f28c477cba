//! Recurrent-model control toolkit: contraction certificates for single-layer
//! GRU models, certified state observers, hand-rolled reverse-mode gradients,
//! a box-constrained nonlinear MPC, rate estimation, data-driven model
//! fitting, and a closed-loop simulation harness.

pub mod config;
pub mod diff;
pub mod error;
pub mod estimation;
pub mod gru;
pub mod math;
pub mod mpc;
pub mod observer;
pub mod sim;
pub mod simplex;

pub use error::{Error, Result};
