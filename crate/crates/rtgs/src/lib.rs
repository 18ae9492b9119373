//! Differentiable renderer and trainer for Gaussian surfel scenes containing
//! mirrors and glass.
//!
//! The scene is represented by three sets of 2D Gaussian surfels: a diffuse
//! set rasterized into per-pixel material buffers, plus reflection and
//! transmittance sets that are ray traced from the shading points recovered
//! out of those buffers. A microfacet BSDF combines the three contributions
//! into the final image. Every stage has a hand-written backward pass so the
//! whole pipeline can be optimized against posed photographs with Adam.

pub mod bsdf;
pub mod error;
pub mod grads;
pub mod img;
pub mod loss;
pub mod mesh;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod threading;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
