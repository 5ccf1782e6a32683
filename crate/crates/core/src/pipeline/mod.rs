//! End-to-end editing: finetune, invert, alternate guided latent updates with
//! handle tracking, then denoise and decode.

pub mod job;

use std::sync::Arc;

use candle_core::Tensor;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim, Denoiser, LatentState, NoiseSchedule};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::finetune::finetune_identity;
use crate::fusion::{apply_update, fuse_gradients, FusionDiagnostics, MaskPenalty};
use crate::geometry::{DragPair, FeatureMap, PixelPoint};
use crate::guidance::{
    estimate_clean_image, global_gradient, latent_features, local_gradient, CleanEstimate, GradientField,
    GradientSource, MotionSupervision, PointFrame,
};
use crate::image_io::{Image, Mask};
use crate::tracking::{deactivate_converged, is_converged, update_handles, TrackerConfig, TrackingStep};

pub use job::{BackendSpec, EncoderSpec, Hyperparams, JobInputs, JobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Finetuning,
    Inverting,
    Optimizing,
    Denoising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Done,
    Failed,
    Cancelled,
}

/// What happened in one optimization iteration. Handles are in image pixels,
/// tracking steps and distances in feature-grid units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub handles: Vec<PixelPoint>,
    pub active: Vec<bool>,
    pub motion_loss: f64,
    pub global_loss: Option<f64>,
    /// Whether the text gradient was recomputed this iteration.
    pub global_fresh: bool,
    pub fusion: FusionDiagnostics,
    pub tracking: Vec<TrackingStep>,
    pub mean_target_distance: f64,
    pub preview: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub mean_distance: f64,
    pub image_fidelity: Option<f64>,
}

/// Feature maps needed to re-locate moved content after the run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSnapshot {
    pub final_features: FeatureMap,
    pub original_features: FeatureMap,
    /// Grid coordinates.
    pub original_handles: Vec<PixelPoint>,
    /// Grid coordinates.
    pub targets: Vec<PixelPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub edited_image: Option<Image>,
    /// Image pixels.
    pub final_pairs: Vec<DragPair>,
    pub iterations_used: usize,
    pub converged: bool,
    pub finetune_loss: Vec<f64>,
    pub trajectory: Vec<TrajectoryRecord>,
    pub metrics: Option<EditMetrics>,
    #[serde(skip)]
    pub snapshot: Option<TrackingSnapshot>,
}

impl EditResult {
    fn started(pairs: Vec<DragPair>) -> Self {
        Self {
            status: RunStatus::Done,
            error: None,
            edited_image: None,
            final_pairs: pairs,
            iterations_used: 0,
            converged: false,
            finetune_loss: Vec::new(),
            trajectory: Vec::new(),
            metrics: None,
            snapshot: None,
        }
    }
}

/// Progress callbacks and cancellation for a running edit.
pub trait EditObserver {
    fn stage(&mut self, _stage: Stage) {}
    fn iteration(&mut self, _record: &TrajectoryRecord) {}
    fn preview(&mut self, _iteration: usize, _image: &Image) {}
    /// Polled between iterations.
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl EditObserver for NoObserver {}

/// True when no pair is left to move.
pub fn check_convergence(pairs: &[DragPair], threshold: f64) -> bool {
    pairs.iter().all(|p| !p.active || is_converged(p, threshold))
}

/// Gradient of `weight * ||(z^k - z^0) * (1 - M)||^2`; `mask` on the latent grid.
pub fn mask_regularize(state: &LatentState, origin: &LatentState, mask: &Mask, weight: f64) -> Result<GradientField> {
    let penalty = MaskPenalty::new(origin, mask, weight)?;
    GradientField::new(state.z.dims().to_vec(), penalty.gradient(&state.values()?), GradientSource::Fused)
}

fn mean_target_distance(pairs: &[DragPair]) -> f64 {
    pairs.iter().map(DragPair::distance).sum::<f64>() / pairs.len().max(1) as f64
}

/// Outcome of one guided latent update.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub state: LatentState,
    pub motion_loss: f64,
    pub global_loss: Option<f64>,
    pub global_fresh: bool,
    pub fusion: FusionDiagnostics,
}

/// Everything fixed for the duration of one optimization loop.
pub struct EditSession<'a> {
    pub model: Arc<dyn Denoiser>,
    pub schedule: NoiseSchedule,
    pub encoder: &'a dyn DualEncoder,
    pub hyperparams: Hyperparams,
    pub prompt_edit: String,
    pub frame: PointFrame,
    /// Grid coordinates.
    pub original_handles: Vec<PixelPoint>,
    pub origin: LatentState,
    pub reference: Tensor,
    pub reference_map: FeatureMap,
    pub supervision: MotionSupervision,
    pub tracker: TrackerConfig,
    pub penalty: Option<MaskPenalty>,
    global_enabled: bool,
    last_global: Option<(GradientField, f64)>,
}

impl<'a> EditSession<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: Arc<dyn Denoiser>,
        schedule: NoiseSchedule,
        encoder: &'a dyn DualEncoder,
        hyperparams: Hyperparams,
        prompt_edit: &str,
        frame: PointFrame,
        original_handles: Vec<PixelPoint>,
        origin: LatentState,
        latent_mask: Option<&Mask>,
    ) -> Result<Self> {
        let reference = latent_features(model.as_ref(), &origin, &schedule)?.detach();
        let reference_map = FeatureMap::from_tensor(&reference)?;
        let penalty = match latent_mask {
            Some(m) => Some(MaskPenalty::new(&origin, m, hyperparams.mask_weight)?),
            None => None,
        };
        let global_enabled = if prompt_edit.trim().is_empty() {
            warn!("edit prompt is empty; text guidance disabled");
            false
        } else {
            hyperparams.lambda > 0.0
        };
        Ok(Self {
            supervision: MotionSupervision {
                radius: hyperparams.r1,
                reference: hyperparams.supervision_reference,
                patch_center: hyperparams.patch_center,
            },
            tracker: TrackerConfig {
                radius: hyperparams.r2,
                strategy: hyperparams.tracking,
                reference: hyperparams.tracking_reference,
                threshold: hyperparams.convergence_threshold,
            },
            model,
            schedule,
            encoder,
            prompt_edit: prompt_edit.to_string(),
            frame,
            original_handles,
            origin,
            reference,
            reference_map,
            penalty,
            global_enabled,
            last_global: None,
            hyperparams,
        })
    }

    pub fn global_enabled(&self) -> bool {
        self.global_enabled
    }

    /// One global-local motion supervision step over the active pairs
    /// (grid coordinates).
    pub fn glms_iteration(&mut self, state: &LatentState, pairs: &[DragPair]) -> Result<IterationOutcome> {
        let (active, handles): (Vec<DragPair>, Vec<PixelPoint>) = pairs
            .iter()
            .zip(&self.original_handles)
            .filter(|(p, _)| p.active)
            .map(|(p, h)| (*p, *h))
            .unzip();
        if active.is_empty() {
            return Err(Error::InvalidJob("no active drag pairs".into()));
        }
        let grid = PointFrame::identity(self.frame.features);
        let (local, motion_loss) = local_gradient(
            state,
            &self.reference,
            &active,
            &handles,
            grid,
            &self.supervision,
            self.model.as_ref(),
            &self.schedule,
        )?;

        let mut global_fresh = false;
        if self.global_enabled && (self.last_global.is_none() || state.iteration.is_multiple_of(self.hyperparams.clip_stride)) {
            self.last_global = Some(global_gradient(
                state,
                &self.prompt_edit,
                self.model.as_ref(),
                self.encoder,
                &self.schedule,
                self.hyperparams.clean_estimate,
            )?);
            global_fresh = true;
        }
        let (global, global_loss) = match &self.last_global {
            Some((g, l)) => (g.clone(), Some(*l)),
            None => (GradientField::zeros(&local.shape, GradientSource::Global), None),
        };

        let (fused, fusion) = fuse_gradients(&global, &local, self.hyperparams.lambda, self.hyperparams.fusion)?;
        let next = apply_update(state, &fused, self.hyperparams.latent_lr, self.penalty.as_ref())?;
        Ok(IterationOutcome {
            state: next,
            motion_loss,
            global_loss,
            global_fresh,
            fusion,
        })
    }

    pub fn features(&self, state: &LatentState) -> Result<FeatureMap> {
        FeatureMap::from_tensor(&latent_features(self.model.as_ref(), state, &self.schedule)?)
    }

    /// Relocates handles on the features of `state`.
    pub fn track(&self, state: &LatentState, pairs: &[DragPair]) -> Result<(Vec<DragPair>, Vec<TrackingStep>, FeatureMap)> {
        let features = self.features(state)?;
        let (next, steps) = update_handles(pairs, &self.original_handles, &features, &self.reference_map, &self.tracker);
        Ok((next, steps, features))
    }

    pub fn preview(&self, state: &LatentState) -> Result<Image> {
        let clean = estimate_clean_image(state, self.model.as_ref(), &self.schedule, CleanEstimate::OneStep)?;
        Image::from_tensor(&clean)
    }

    fn to_image(&self, pairs: &[DragPair]) -> Vec<DragPair> {
        pairs
            .iter()
            .map(|p| DragPair {
                handle: self.frame.to_image(p.handle),
                target: self.frame.to_image(p.target),
                active: p.active,
            })
            .collect()
    }
}

/// Runs a job on an already constructed backend and encoder.
///
/// Errors before optimization starts (bad inputs, shape mismatch) are
/// returned; later failures and cancellation yield a partial result.
pub fn run_edit(
    job: &JobSpec,
    inputs: &JobInputs,
    model: Arc<dyn Denoiser>,
    encoder: &dyn DualEncoder,
    observer: &mut dyn EditObserver,
) -> Result<EditResult> {
    let image_dims = inputs.image.dims();
    job.validate(image_dims)?;
    if model.image_dims() != image_dims {
        return Err(Error::InvalidJob(format!(
            "backend expects {}x{} images, got {}x{}",
            model.image_dims().width,
            model.image_dims().height,
            image_dims.width,
            image_dims.height
        )));
    }
    let mut result = EditResult::started(job.drag_pairs());
    if let Err(e) = execute(job, inputs, model, encoder, observer, &mut result) {
        warn!("edit failed: {e}");
        result.status = RunStatus::Failed;
        result.error = Some(e.to_string());
    }
    Ok(result)
}

fn execute(
    job: &JobSpec,
    inputs: &JobInputs,
    model: Arc<dyn Denoiser>,
    encoder: &dyn DualEncoder,
    observer: &mut dyn EditObserver,
    result: &mut EditResult,
) -> Result<()> {
    let hp = &job.hyperparams;
    let schedule = model.noise_schedule(hp.denoise_steps)?;
    let image = inputs.image.to_tensor()?;

    observer.stage(Stage::Finetuning);
    let model = if hp.skip_finetune || hp.lora.steps == 0 || job.backend.adapters.is_some() {
        model
    } else {
        let outcome = finetune_identity(model, &image, &job.prompt_original, &hp.lora, &schedule, hp.seed)?;
        result.finetune_loss = outcome.loss_trace;
        outcome.model
    };

    observer.stage(Stage::Inverting);
    let prompt = if hp.condition_on_edit && !job.prompt_edit.trim().is_empty() {
        &job.prompt_edit
    } else {
        &job.prompt_original
    };
    let conditioning = model.embed_prompt(prompt)?;
    let z0 = model.encode_image(&image)?;
    let origin = ddim::invert_to_strength(&z0, &conditioning, hp.inversion_strength, model.as_ref(), &schedule)?;
    info!("inverted to t={} of {}", origin.timestep_index, schedule.num_steps);

    let frame = PointFrame {
        image: inputs.image.dims(),
        features: model.latent_shape().dims,
    };
    let mut pairs: Vec<DragPair> = job
        .drag_pairs()
        .iter()
        .map(|p| DragPair::new(frame.to_features(p.handle), frame.to_features(p.target)))
        .collect();
    let original_handles: Vec<PixelPoint> = pairs.iter().map(|p| p.handle).collect();
    deactivate_converged(&mut pairs, hp.convergence_threshold);
    let latent_mask = inputs.mask.as_ref().map(|m| m.resample(frame.features));
    let mut session = EditSession::new(
        model.clone(),
        schedule.clone(),
        encoder,
        hp.clone(),
        &job.prompt_edit,
        frame,
        original_handles.clone(),
        origin.clone(),
        latent_mask.as_ref(),
    )?;

    observer.stage(Stage::Optimizing);
    let mut state = origin;
    let mut features = session.reference_map.clone();
    while !check_convergence(&pairs, hp.convergence_threshold) && state.iteration < hp.max_iterations {
        if observer.cancelled() {
            result.status = RunStatus::Cancelled;
            result.final_pairs = session.to_image(&pairs);
            return Ok(());
        }
        let outcome = session.glms_iteration(&state, &pairs)?;
        state = outcome.state;
        let (next, steps, tracked) = session.track(&state, &pairs)?;
        pairs = next;
        features = tracked;

        let k = state.iteration;
        let preview = hp.preview_stride > 0 && k % hp.preview_stride == 0;
        if preview {
            observer.preview(k, &session.preview(&state)?);
        }
        let record = TrajectoryRecord {
            iteration: k,
            handles: pairs.iter().map(|p| frame.to_image(p.handle)).collect(),
            active: pairs.iter().map(|p| p.active).collect(),
            motion_loss: outcome.motion_loss,
            global_loss: outcome.global_loss,
            global_fresh: outcome.global_fresh,
            fusion: outcome.fusion,
            tracking: steps,
            mean_target_distance: mean_target_distance(&pairs),
            preview,
        };
        observer.iteration(&record);
        result.trajectory.push(record);
        result.iterations_used = k;
        result.final_pairs = session.to_image(&pairs);
    }
    result.converged = check_convergence(&pairs, hp.convergence_threshold);
    result.final_pairs = session.to_image(&pairs);
    result.snapshot = Some(TrackingSnapshot {
        final_features: features,
        original_features: session.reference_map.clone(),
        original_handles,
        targets: pairs.iter().map(|p| p.target).collect(),
    });

    observer.stage(Stage::Denoising);
    let clean = ddim::denoise_to_clean(&state, model.as_ref(), &schedule)?;
    result.edited_image = Some(Image::from_tensor(&model.decode_latent(&clean)?)?);
    result.metrics = Some(EditMetrics {
        mean_distance: crate::evaluation::mean_distance(result)?,
        image_fidelity: None,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::toy::{ToyDenoiser, ToyWeights};
    use crate::diffusion::ToyConfig;
    use crate::encoder::{ToyClipEncoder, ToyEncoderConfig};
    use crate::geometry::Dims;
    use crate::synthetic::blob_scene;

    fn setup(pairs: Vec<[f64; 4]>) -> (JobSpec, JobInputs, Arc<dyn Denoiser>, ToyClipEncoder) {
        let dims = Dims::new(16, 16);
        let image = blob_scene(dims, PixelPoint::new(5.0, 8.0), 3.0, [0.9, 0.1, 0.1], 3);
        let mut job = JobSpec::new("unused.png", "a red circle", "a red circle", pairs);
        job.hyperparams.skip_finetune = true;
        job.hyperparams.max_iterations = 5;
        job.hyperparams.r2 = 3;
        let model: Arc<dyn Denoiser> =
            Arc::new(ToyDenoiser::new(Arc::new(ToyWeights::init(1, ToyConfig::small(16)).unwrap())));
        let encoder = ToyClipEncoder::new(2, ToyEncoderConfig::default()).unwrap();
        (job, JobInputs { image, mask: None }, model, encoder)
    }

    #[test]
    fn convergence_check() {
        let at = DragPair::new(PixelPoint::new(2.0, 2.0), PixelPoint::new(2.0, 2.0));
        let near = DragPair::new(PixelPoint::new(2.0, 2.0), PixelPoint::new(2.5, 2.0));
        let far = DragPair::new(PixelPoint::new(2.0, 2.0), PixelPoint::new(6.0, 2.0));
        assert!(check_convergence(&[], 1.0));
        assert!(check_convergence(&[at], 0.0));
        assert!(!check_convergence(&[near], 0.0));
        assert!(check_convergence(&[at, near], 1.0));
        assert!(!check_convergence(&[at, far], 1.0));
        let mut done = far;
        done.active = false;
        assert!(check_convergence(&[done], 1.0));
    }

    #[test]
    fn vacuous_drag_runs_zero_iterations() {
        let (job, inputs, model, encoder) = setup(vec![[5.0, 8.0, 5.0, 8.0]]);
        let r = run_edit(&job, &inputs, model, &encoder, &mut NoObserver).unwrap();
        assert_eq!(r.status, RunStatus::Done);
        assert_eq!(r.iterations_used, 0);
        assert!(r.converged && r.trajectory.is_empty());
        let out = r.edited_image.unwrap();
        let err: f64 = out.data.iter().zip(&inputs.image.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.1, "reconstruction error {err}");
    }

    #[test]
    fn trajectory_is_complete_and_deterministic() {
        let (job, inputs, model, encoder) = setup(vec![[5.0, 8.0, 11.0, 8.0]]);
        let a = run_edit(&job, &inputs, model.clone(), &encoder, &mut NoObserver).unwrap();
        let b = run_edit(&job, &inputs, model, &encoder, &mut NoObserver).unwrap();
        assert_eq!(a.status, RunStatus::Done);
        assert_eq!(a.trajectory.len(), a.iterations_used);
        assert!(a.iterations_used <= 5);
        for (i, rec) in a.trajectory.iter().enumerate() {
            assert_eq!(rec.iteration, i + 1);
            assert!(rec.motion_loss.is_finite());
        }
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn empty_edit_prompt_disables_text_guidance() {
        let (mut job, inputs, model, encoder) = setup(vec![[5.0, 8.0, 11.0, 8.0]]);
        job.prompt_edit = String::new();
        job.hyperparams.max_iterations = 2;
        let r = run_edit(&job, &inputs, model, &encoder, &mut NoObserver).unwrap();
        assert!(r.trajectory.iter().all(|t| t.global_loss.is_none()));
    }

    #[test]
    fn cancellation_returns_partial_result() {
        struct CancelAfter(usize);
        impl EditObserver for CancelAfter {
            fn iteration(&mut self, _r: &TrajectoryRecord) {
                self.0 = self.0.saturating_sub(1);
            }
            fn cancelled(&self) -> bool {
                self.0 == 0
            }
        }
        let (mut job, inputs, model, encoder) = setup(vec![[5.0, 8.0, 14.0, 8.0]]);
        job.hyperparams.tracking = crate::tracking::TrackingStrategy::Pt;
        let r = run_edit(&job, &inputs, model, &encoder, &mut CancelAfter(2)).unwrap();
        assert_eq!(r.status, RunStatus::Cancelled);
        assert!(r.trajectory.len() <= 2);
        assert!(r.edited_image.is_none());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let (job, mut inputs, model, encoder) = setup(vec![[5.0, 8.0, 11.0, 8.0]]);
        inputs.image = Image::filled(Dims::new(20, 20), [0.5; 3]);
        assert!(run_edit(&job, &inputs, model, &encoder, &mut NoObserver).is_err());
    }

    #[test]
    fn mask_regularizer_cases() {
        let origin = LatentState::new(
            crate::tensor::from_vec(vec![0.0; 4], &[1, 1, 2, 2]).unwrap(),
            1,
            crate::tensor::from_vec(vec![0.0], &[1]).unwrap(),
        );
        let moved = origin.with_z(crate::tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap());
        let open = mask_regularize(&moved, &origin, &Mask::full(Dims::new(2, 2), true), 0.1).unwrap();
        assert!(open.values.iter().all(|&v| v == 0.0));
        let shut = mask_regularize(&moved, &origin, &Mask::full(Dims::new(2, 2), false), 0.1).unwrap();
        for (g, z) in shut.values.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((g - 0.2 * z).abs() < 1e-15);
        }
    }
}
