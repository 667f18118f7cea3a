//! Self-supervised through-plane resolution enhancement for anisotropic CT
//! volumes with arbitrary slice thickness and slice overlap.
//!
//! The pipeline trains an image-to-image network on axial slices that were
//! degraded to mimic the through-plane geometry of the volume, then applies
//! it to the upscaled coronal and sagittal slices.
//!
//! * [`resampler`] builds the exact 1-D degradation and restoration operators.
//! * [`volume`] holds voxel data and geometry, slicing, and file I/O.
//! * [`dataset`] generates the degraded/pristine training pairs.
//! * [`network`] is a mixed-scale dense dilated network with ADAM.
//! * [`trainer`] and [`enhancer`] run training and inference.
//! * [`metrics`], [`phantom`], [`baselines`] and [`harness`] support the
//!   experiments.

pub mod baselines;
pub mod dataset;
pub mod enhancer;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod resampler;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use image::Image;
