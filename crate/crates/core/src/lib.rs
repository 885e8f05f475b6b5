//! Diffusion-guided activation maximization for point-cloud classifiers.
//!
//! The crate bundles a PointNet-style classifier, a permutation-equivariant
//! diffusion denoiser (PDT), the guided sampler that turns them into global
//! explanations, integrated-gradient saliency over the sampling trajectory,
//! and the evaluation metrics. Numeric code is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix the common choices.

pub mod autodiff;
pub mod classifier;
pub mod diffusion;
pub mod error;
pub mod igd;
pub mod metrics;
pub mod nn;
pub mod pdt;
pub mod pointcloud;
pub mod rng;
pub mod sampler;
mod scalar;

pub use error::{DamError, Result};
pub use scalar::Scalar;

pub type PointCloud64 = pointcloud::PointCloud<f64>;
pub type PointCloud32 = pointcloud::PointCloud<f32>;
pub type Classifier64 = classifier::Classifier<f64>;
pub type DiffusionModel64 = diffusion::DiffusionModel<f64>;
