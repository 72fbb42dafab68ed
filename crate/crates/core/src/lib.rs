//! Differentiable quadric-convex assembly fitted to posed images.

pub mod assembly;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod matrix;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod synthgen;

pub use error::{Error, Result};
pub use matrix::Matrix;
