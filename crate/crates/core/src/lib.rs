//! Differentiable range-Doppler rendering over learned reflectance and
//! transmittance fields.

pub mod baselines;
pub mod datasets;
pub mod diffengine;
pub mod error;
pub mod evalmetrics;
pub mod field;
pub mod geometry;
pub mod poses;
pub mod renderer;
pub mod scenes;
pub mod sigproc;
pub mod trainer;

pub use error::{Error, Result};
