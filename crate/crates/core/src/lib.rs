//! Dual-branch latent diffusion inpainting at toy scale.

pub mod branch;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod text;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use raster::Image;
