//! Latent-space image editing that combines drag guidance with text guidance
//! on a diffusion model.

pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod fusion;
pub mod geometry;
pub mod guidance;
pub mod image_io;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod tracking;

pub use error::{Error, Result};
pub use geometry::{Dims, DragPair, FeatureMap, PixelPoint};
