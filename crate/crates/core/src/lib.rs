//! Multi-IMU error-state Kalman filtering for legged robots.
//!
//! The crate tracks the pose, velocity and IMU biases of every instrumented
//! link of a robot. Each link is predicted with either a free inertial model
//! or, when it touches the ground, a model that rotates it about its center
//! of pressure. Predictions are corrected with tilt measurements of the
//! contact links and with the relative poses given by a kinematic model that
//! includes estimated structural deformations.
//!
//! Besides the filter the crate ships a single-IMU baseline, a synthetic
//! biped gait simulator and trajectory metrics (ATE, RPE, vertical drift per
//! step).



pub mod baseline;
pub mod error;

pub mod contact;
pub mod estimator;
pub mod filter;
pub mod io;

pub mod manifold;
pub mod metrics;

pub mod robot;
pub mod run;
pub mod sim;


pub use error::{Error, Result};

/// Gravity in the inertial frame (m/s²).
pub const GRAVITY: nalgebra::Vector3<f64> = nalgebra::Vector3::new(0.0, 0.0, -9.81);
