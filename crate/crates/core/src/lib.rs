//! Facial keypoint regression toolkit.
//!
//! Reads the 96x96 grayscale face table, extracts local binary pattern
//! textures, reduces dimension with PCA, fits eight regressor families and
//! compares them by RMSE on a held-out split.

pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lbp;
pub mod matrix;
pub mod pca;
pub mod pipeline;
pub mod regressors;
pub mod rng;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, Provenance, TargetMatrix};
