//! Differentiable Gaussian-splat compositing with stochastic per-Gaussian
//! masks and spatially variant mask regularization.
//!
//! The pipeline is split the same way a training step runs:
//!
//! - [`model`]: scene parameters, activations, Gumbel-sigmoid mask sampling.
//! - [`projection`]: pinhole camera and 3D Gaussian to 2D splat projection.
//! - [`rasterizer`]: tile-based front-to-back compositing of RGB and of the
//!   spatial-mask image under one of three aggregation designs.
//! - [`gradients`]: analytic backward passes and a finite-difference oracle.
//! - [`losses`]: reconstruction loss, mask regularizers and quality metrics.
//! - [`schedule`]: densification, stochastic pruning and their timing.
//! - [`optim`]: Adam over per-Gaussian parameter blocks.
//! - [`harness`]: synthetic scenes, the trainer, experiment runners.
//! - [`io`]: scene, camera, image and log formats.

pub mod error;
pub mod gradients;
pub mod harness;
pub mod imaging;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod projection;
pub mod rasterizer;
pub mod real;
pub mod schedule;

pub use error::{Error, Result};
pub use model::{Gaussian3D, GaussianId, MaskSample, Scene};
pub use projection::{Camera, Splat2D};
pub use rasterizer::{render, MaskMode, RenderOptions, RenderOutputs};
pub use real::Real;
