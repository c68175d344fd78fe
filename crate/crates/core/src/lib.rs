//! Relightable outdoor Gaussian-splat scenes.
//!
//! The pipeline fits an ambient-only model, extracts sun visibility from its
//! residual, decomposes appearance into sun, sky and indirect shading over a
//! shared reflectance, traces shadows through the Gaussians and bakes them
//! into a direction-conditioned decoder so relighting is a single splat pass.

pub mod autodiff;
pub mod error;
pub mod extract;
pub mod graph;
pub mod image;
pub mod losses;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod raster;
pub mod scene;
pub mod shading;
pub mod shadow;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use image::ImagePlane;
