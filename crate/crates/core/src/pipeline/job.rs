//! Job files: what to edit, how, and with which backend.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::toy::{ToyDenoiser, ToyWeights};
use crate::diffusion::{Denoiser, ToyConfig};
use crate::encoder::{ToyClipEncoder, ToyEncoderConfig};
use crate::error::{Error, Result};
use crate::finetune::{AdapterSet, LoraConfig};
use crate::fusion::FusionVariant;
use crate::geometry::{Dims, DragPair, PixelPoint};
use crate::guidance::{CleanEstimate, PatchCenter, ReferenceSource};
use crate::image_io::{Image, Mask};
use crate::tracking::{TrackingReference, TrackingStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Motion supervision patch radius.
    pub r1: usize,
    /// Point tracking search radius.
    pub r2: usize,
    pub lambda: f64,
    pub max_iterations: usize,
    pub inversion_strength: f64,
    pub denoise_steps: usize,
    pub lora: LoraConfig,
    pub skip_finetune: bool,
    pub latent_lr: f64,
    pub seed: u64,
    pub tracking: TrackingStrategy,
    pub tracking_reference: TrackingReference,
    pub fusion: FusionVariant,
    pub supervision_reference: ReferenceSource,
    pub patch_center: PatchCenter,
    pub clean_estimate: CleanEstimate,
    /// Recompute the text gradient every this many iterations, reusing the
    /// last one in between.
    pub clip_stride: usize,
    pub mask_weight: f64,
    /// In feature-grid units.
    pub convergence_threshold: f64,
    /// Emit a preview every this many iterations; 0 disables previews.
    pub preview_stride: usize,
    /// Condition the denoiser on the edit prompt instead of the original one.
    pub condition_on_edit: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            r1: 4,
            r2: 12,
            lambda: 0.7,
            max_iterations: 2000,
            inversion_strength: 0.7,
            denoise_steps: 50,
            lora: LoraConfig::default(),
            skip_finetune: false,
            latent_lr: 0.01,
            seed: 0,
            tracking: TrackingStrategy::default(),
            tracking_reference: TrackingReference::default(),
            fusion: FusionVariant::default(),
            supervision_reference: ReferenceSource::default(),
            patch_center: PatchCenter::default(),
            clean_estimate: CleanEstimate::default(),
            clip_stride: 1,
            mask_weight: 0.1,
            convergence_threshold: 1.0,
            preview_stride: 10,
            condition_on_edit: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidJob(msg.into()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be a non-negative number");
        }
        if !(self.inversion_strength > 0.0 && self.inversion_strength <= 1.0) {
            return bad("inversion_strength must lie in (0, 1]");
        }
        if self.denoise_steps == 0 {
            return bad("denoise_steps must be at least 1");
        }
        if !(self.latent_lr.is_finite() && self.latent_lr > 0.0) {
            return bad("latent_lr must be positive");
        }
        if self.clip_stride == 0 {
            return bad("clip_stride must be at least 1");
        }
        if !(self.mask_weight.is_finite() && self.mask_weight >= 0.0) {
            return bad("mask_weight must be non-negative");
        }
        if !(self.convergence_threshold.is_finite() && self.convergence_threshold >= 0.0) {
            return bad("convergence_threshold must be non-negative");
        }
        self.lora.validate()
    }
}

/// The toy denoiser, either freshly initialized from `seed` or loaded from a
/// checkpoint. Without an explicit config it is sized to the input image.
/// `adapters` attaches previously finetuned low-rank adapters, in which case
/// the pipeline skips its own finetuning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ToyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapters: Option<PathBuf>,
}

impl BackendSpec {
    pub fn build(&self, image_dims: Dims) -> Result<Arc<dyn Denoiser>> {
        let weights = match &self.checkpoint {
            Some(path) => ToyWeights::load(path)?,
            None => {
                let config = self
                    .config
                    .clone()
                    .unwrap_or_else(|| ToyConfig::default().with_size(image_dims.height, image_dims.width));
                ToyWeights::init(self.seed, config)?
            }
        };
        let model = ToyDenoiser::new(Arc::new(weights));
        match &self.adapters {
            Some(path) => model.with_adapters(Arc::new(AdapterSet::load(path)?)),
            None => Ok(Arc::new(model)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub config: ToyEncoderConfig,
    /// Contrastive warm-up steps on synthetic captions; 0 keeps the random
    /// initialization.
    pub train_steps: usize,
    pub train_lr: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint: None,
            config: ToyEncoderConfig::default(),
            train_steps: 0,
            train_lr: 1e-2,
        }
    }
}

impl EncoderSpec {
    pub fn build(&self, image_dims: Dims) -> Result<ToyClipEncoder> {
        if let Some(path) = &self.checkpoint {
            return ToyClipEncoder::load(path);
        }
        let mut encoder = ToyClipEncoder::new(self.seed, self.config.clone())?;
        if self.train_steps > 0 {
            encoder.train_contrastive(image_dims, self.train_steps, self.train_lr, 0.1)?;
        }
        Ok(encoder)
    }
}

/// One edit request. Points are `[hx, hy, tx, ty]` in image pixels with the
/// origin at the top-left corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub image: PathBuf,
    pub prompt_original: String,
    #[serde(default)]
    pub prompt_edit: String,
    pub pairs: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
}

/// Decoded image and mask of a job.
#[derive(Debug, Clone)]
pub struct JobInputs {
    pub image: Image,
    pub mask: Option<Mask>,
}

impl JobSpec {
    pub fn new(image: impl Into<PathBuf>, prompt_original: &str, prompt_edit: &str, pairs: Vec<[f64; 4]>) -> Self {
        Self {
            image: image.into(),
            prompt_original: prompt_original.into(),
            prompt_edit: prompt_edit.into(),
            pairs,
            mask: None,
            hyperparams: Hyperparams::default(),
            backend: BackendSpec::default(),
            encoder: EncoderSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidJob(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidJob(e.to_string()))
    }

    /// Reads a job file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::from_toml(&text)?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.image);
        if let Some(m) = &mut self.mask {
            fix(m);
        }
        if let Some(c) = &mut self.backend.checkpoint {
            fix(c);
        }
        if let Some(c) = &mut self.backend.adapters {
            fix(c);
        }
        if let Some(c) = &mut self.encoder.checkpoint {
            fix(c);
        }
    }

    pub fn drag_pairs(&self) -> Vec<DragPair> {
        self.pairs
            .iter()
            .map(|&[hx, hy, tx, ty]| DragPair::new(PixelPoint::new(hx, hy), PixelPoint::new(tx, ty)))
            .collect()
    }

    /// Checks everything that does not need the image contents.
    pub fn validate(&self, image_dims: Dims) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidJob("at least one drag pair is required".into()));
        }
        if self.prompt_original.trim().is_empty() {
            return Err(Error::InvalidJob("prompt_original must not be empty".into()));
        }
        for (i, pair) in self.drag_pairs().iter().enumerate() {
            for (what, p) in [("handle", pair.handle), ("target", pair.target)] {
                if !p.is_finite() || !p.in_bounds(image_dims) {
                    return Err(Error::InvalidJob(format!(
                        "pair {i}: {what} ({}, {}) outside the {}x{} image",
                        p.x, p.y, image_dims.width, image_dims.height
                    )));
                }
            }
        }
        self.hyperparams.validate()
    }

    pub fn load_inputs(&self) -> Result<JobInputs> {
        let image = Image::load_png(&self.image)?;
        let mask = self.mask.as_deref().map(Mask::load_png).transpose()?;
        if let Some(m) = &mask {
            if m.dims() != image.dims() {
                return Err(Error::InvalidJob(format!(
                    "mask is {}x{} but the image is {}x{}",
                    m.width, m.height, image.width, image.height
                )));
            }
        }
        self.validate(image.dims())?;
        Ok(JobInputs { image, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
image = "scene.png"
prompt_original = "a red circle"
pairs = [[10, 12, 16, 12]]
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let spec = JobSpec::from_toml(MINIMAL).unwrap();
        let h = &spec.hyperparams;
        assert_eq!((h.r1, h.r2, h.max_iterations, h.denoise_steps), (4, 12, 2000, 50));
        assert_eq!((h.lambda, h.inversion_strength), (0.7, 0.7));
        assert_eq!((h.lora.rank, h.lora.steps, h.lora.learning_rate), (16, 80, 5e-4));
        assert_eq!(spec.prompt_edit, "");
        assert_eq!(spec.drag_pairs()[0].target, PixelPoint::new(16.0, 12.0));
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = JobSpec::from_toml(MINIMAL).unwrap();
        spec.mask = Some("mask.png".into());
        spec.hyperparams.fusion = FusionVariant::ProGrad;
        spec.hyperparams.tracking = TrackingStrategy::Pt;
        spec.backend.config = Some(ToyConfig::small(32));
        spec.pairs.push([1.5, 2.25, 3.0, 4.0]);
        let back = JobSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn validation_errors() {
        let dims = Dims::new(32, 32);
        let mut spec = JobSpec::from_toml(MINIMAL).unwrap();
        assert!(spec.validate(dims).is_ok());
        spec.pairs[0][2] = 40.0;
        assert!(spec.validate(dims).is_err());
        spec.pairs.clear();
        assert!(spec.validate(dims).is_err());
        let mut spec = JobSpec::from_toml(MINIMAL).unwrap();
        spec.hyperparams.inversion_strength = 0.0;
        assert!(spec.validate(dims).is_err());
        assert!(JobSpec::from_toml("image = 1").is_err());
        assert!(JobSpec::from_toml(&format!("{MINIMAL}\nbogus = 3")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_job_dir() {
        let mut spec = JobSpec::from_toml(MINIMAL).unwrap();
        spec.resolve_paths(Path::new("/data/jobs"));
        assert_eq!(spec.image, PathBuf::from("/data/jobs/scene.png"));
    }
}
