//! Coronary artery calcium quantification.
//!
//! The crate covers the whole path from CT volume to risk category:
//!
//! - [`volume`]: CT / mask / probability volumes and their file format
//! - [`preprocess`]: resizing, cropping and 9-slice 2.5D stacks
//! - [`tensor`]: f64 tensors with reverse-mode autodiff
//! - [`nn`]: DenseRAUnet building blocks and the assembled network
//! - [`loss`]: weighted bootstrap loss and exponential soft-IoU loss
//! - [`optim`]: SGD with momentum, step decay and a toy training loop
//! - [`scoring`]: thresholding, connected components and Agatston scoring
//! - [`metrics`]: pixel F1 and cohort risk agreement rates
//! - [`phantom`]: synthetic volumes with analytically known scores

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod preprocess;
pub mod scoring;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
