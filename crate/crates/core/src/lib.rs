//! Tracking model predictive control for nonlinear systems based on online
//! linearization.

pub mod augment;
pub mod baselines;
pub mod certify;
pub mod cstr;
pub mod equilibria;
pub mod error;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod sets;
pub mod smoothness;

pub use error::{Error, Result};
