//! Analysis of minimum-norm safe controllers for control-affine systems with
//! control barrier functions.
//!
//! The crate evaluates the closed-form min-norm controller, locates the
//! boundary states where it can be discontinuous, and decides whether it
//! stays bounded there using a linear test on second-order data, with ray
//! probes and closed-loop simulation as numerical cross-checks.

pub mod boundedness;
pub mod cli;
pub mod controller;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod model;
pub mod sim;
pub mod zset;

pub use error::{CbfError, Result};
