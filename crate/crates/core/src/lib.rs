//! Boundary-guided three-branch prediction of per-spot gene expression from
//! image, edge and nuclei feature tokens.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape and gradient checking
//! - [`data`]: spot tables, expression matrices, windows, synthetic slides
//! - [`features`]: feature providers and the BGFT tensor file format
//! - [`model`]: cross-attention guiding blocks, the three branches, fusion
//! - [`training`]: composite loss, Adam, epoch loop, cross-validation
//! - [`evaluation`]: MSE / PCC metrics and prediction-map export

pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
