//! Reconstruction of the time-dependent immune response `E(t)` in a
//! three-equation acute-HIV model from clinical viral-load and T-cell
//! measurements.
//!
//! The pipeline: interpolate an 8-point clinical record onto a time mesh,
//! integrate the forward model implicitly, solve the adjoint system backward,
//! assemble the regularized objective's gradient, minimize by conjugate
//! gradients with a decaying regularization schedule, and refine the mesh
//! locally where the weighted stationarity residual concentrates.

pub mod adaptive;
pub mod adjoint;
pub mod data;
pub mod error;
pub mod forward;
pub mod mesh;
pub mod model;
pub mod objective;
pub mod optimizer;

pub use error::{Error, Result};
