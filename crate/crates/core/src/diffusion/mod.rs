//! Denoiser abstraction, noise schedule, DDIM inversion and sampling.

pub mod checkpoint;
pub mod ddim;
pub mod schedule;
pub mod toy;

use std::sync::Arc;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::finetune::{AdapterSet, LinearLayerInfo};
use crate::geometry::Dims;

pub use ddim::{
    ddim_denoise_step, ddim_invert_step, denoise_to_clean, invert_to_strength, InversionTrace,
};
pub use schedule::NoiseSchedule;
pub use toy::{make_toy_backend, ToyConfig, ToyDenoiser};

/// Shape of a latent without the leading batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub channels: usize,
    pub dims: Dims,
}

impl LatentShape {
    pub fn batched(&self) -> (usize, usize, usize, usize) {
        (1, self.channels, self.dims.height, self.dims.width)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.dims.len()
    }
}

pub struct DenoiserOutput {
    /// Noise estimate, shaped like the latent.
    pub noise: Tensor,
    /// Activations of the last decoder layer, `(1, C_f, H_f, W_f)`.
    pub features: Tensor,
}

/// A noise-prediction network together with its latent codec.
///
/// Implementations must be deterministic in `(z, t, conditioning)` and
/// differentiable with respect to `z`. Time is passed as a fraction of the
/// diffusion horizon so one network serves schedules of any length.
pub trait Denoiser: Send + Sync {
    fn forward(&self, z: &Tensor, t: f64, conditioning: &Tensor) -> Result<DenoiserOutput>;

    fn predict_noise(&self, z: &Tensor, t: f64, conditioning: &Tensor) -> Result<Tensor> {
        Ok(self.forward(z, t, conditioning)?.noise)
    }

    fn extract_features(&self, z: &Tensor, t: f64, conditioning: &Tensor) -> Result<Tensor> {
        Ok(self.forward(z, t, conditioning)?.features)
    }

    fn latent_shape(&self) -> LatentShape;

    /// Spatial size of images accepted by [`Denoiser::encode_image`].
    fn image_dims(&self) -> Dims;

    fn embed_prompt(&self, prompt: &str) -> Result<Tensor>;

    /// Maps a `(1, 3, H, W)` image in `[-1, 1]` to a latent.
    fn encode_image(&self, image: &Tensor) -> Result<Tensor>;

    /// Maps a latent back to a `(1, 3, H, W)` image in `[-1, 1]`.
    fn decode_latent(&self, z: &Tensor) -> Result<Tensor>;

    fn noise_schedule(&self, num_steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(num_steps)
    }

    /// Linear projections that can carry low-rank adapters.
    fn linear_layers(&self) -> Vec<LinearLayerInfo> {
        Vec::new()
    }

    fn with_adapters(&self, _adapters: Arc<AdapterSet>) -> Result<Arc<dyn Denoiser>> {
        Err(Error::Unsupported("low-rank adapters"))
    }
}

/// The latent being optimized together with where it sits in the schedule.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Tensor,
    pub timestep_index: usize,
    pub iteration: usize,
    pub conditioning: Tensor,
}

impl LatentState {
    pub fn new(z: Tensor, timestep_index: usize, conditioning: Tensor) -> Self {
        Self {
            z,
            timestep_index,
            iteration: 0,
            conditioning,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        Ok(self.z.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn with_z(&self, z: Tensor) -> Self {
        Self {
            z,
            ..self.clone()
        }
    }
}
