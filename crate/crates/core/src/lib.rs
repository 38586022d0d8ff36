//! Magnetic-field aided inertial navigation.
//!
//! An error-state Kalman filter that tracks an inertial navigation state
//! together with the coefficients of a local, Maxwell-constrained polynomial
//! model of the magnetic field measured by a rigid magnetometer array.

pub mod array;
pub mod dataio;
pub mod eskf;
pub mod eval;
pub mod geom;
pub mod magmodel;
pub mod sim;
pub mod strapdown;
