//! Survival prediction from the bottleneck features of 3D U-Net segmentation
//! networks, on synthetic PET/CT phantoms.
//!
//! A U-Net trained only for tumour segmentation encodes each case into its
//! bottleneck activations. Those features are reduced by Pearson-distance
//! k-medoids clustering, screened by LASSO and fed to a logistic survival
//! model. The tensor core ([`autodiff`], [`unet`], [`visualize`]) is generic
//! over [`Scalar`]; the aliases below fix the precision.

pub mod autodiff;
pub mod cluster;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod survival;
pub mod unet;
pub mod visualize;
pub mod volume;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use features::FeatureMatrix;
pub use scalar::Scalar;
pub use volume::{Modality, Volume};

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type UNet32 = unet::UNetModel<f32>;
pub type UNet64 = unet::UNetModel<f64>;
