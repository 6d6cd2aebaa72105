//! Residual-dynamics learning for an NMPC quadrotor planner.
//!
//! A sparse Gaussian process learns the gap between a 4-DOF kinematic model
//! and a simulated plant; the learned residual augments the model used by a
//! multiple-shooting NMPC local planner.

pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod nmpc;
pub mod planner;
pub mod residual;

pub use error::{Error, ErrorClass, Result};
