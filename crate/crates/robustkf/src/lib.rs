//! Robust Kalman filter synthesis: jointly computes the filter gain and
//! the largest tolerable process/sensor noise covariances meeting a
//! steady-state error budget, via semidefinite programming, with
//! independent verification and Monte-Carlo simulation.

pub mod cases;
pub mod design;
pub mod error;
pub mod lmi;
pub mod model;
pub mod sim;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
