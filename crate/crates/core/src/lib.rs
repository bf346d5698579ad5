//! Bayesian 3D convolutional classifiers for volumetric scans.
//!
//! The crate trains, calibrates and explains binary classifiers over 3D
//! voxel grids. It provides a self-contained reverse-mode autodiff engine,
//! deterministic and variational layers (reparameterization, local
//! reparameterization, Flipout, multiplicative normalizing flows, MC
//! dropout), RealNVP coupling flows, an ELBO training loop with Adam,
//! calibration and classification metrics, Monte-Carlo predictive
//! intervals, Shapley-value attribution over voxel patches, and a NIfTI-1
//! ingestion pipeline.

pub mod augment;
pub mod autodiff;
pub mod bayes;
pub mod calibration;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod flows;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod nifti;
pub mod rng;
pub mod shap;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
