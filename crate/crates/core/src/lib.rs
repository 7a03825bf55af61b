//! Geometry-dependent ECG lead fields: finite-element ground truth,
//! eikonal activation, ECG assembly and neural surrogates of the lead-field
//! gradient conditioned on anatomy.

pub mod config;
pub mod ecg;
pub mod eikonal;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod mesh;
pub mod metrics;
pub mod spatial;
pub mod surrogate;
pub mod store;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod sdf;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
