//! Drag guidance (motion supervision, the local signal) and text guidance
//! (CLIP losses, the global signal), with their gradients on the latent.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim, Denoiser, LatentState, NoiseSchedule};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::geometry::{
    patch_points, resize_features, sample_tensor, to_feature_coords, unit_direction, Dims,
    DragPair, PixelPoint,
};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientSource {
    Global,
    Local,
    Fused,
}

/// A latent-shaped gradient, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub source: GradientSource,
}

impl GradientField {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, source: GradientSource) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![values.len()],
            });
        }
        crate::error::ensure_finite(&values, format!("{source:?} gradient"))?;
        Ok(Self {
            shape,
            values,
            source,
        })
    }

    pub fn zeros(shape: &[usize], source: GradientSource) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
            source,
        }
    }

    pub fn from_tensor(t: &Tensor, source: GradientSource) -> Result<Self> {
        Self::new(t.dims().to_vec(), tensor::to_vec(t)?, source)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        tensor::from_vec(self.values.clone(), &self.shape)
    }

    pub fn norm(&self) -> f64 {
        tensor::norm(&self.values)
    }
}

/// How the clean image `I(z_t)` is estimated from the optimized latent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanEstimate {
    /// `x0 = (z_t - sigma_t * eps(z_t)) / alpha_t`: one model call.
    #[default]
    OneStep,
    /// Differentiable deterministic sampling down to timestep 0.
    FullDenoise,
}

/// Decoded clean-image estimate for `state`, differentiable in `state.z`.
pub fn estimate_clean_image(
    state: &LatentState,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mode: CleanEstimate,
) -> Result<Tensor> {
    let t = state.timestep_index;
    let alpha = schedule.alpha(t)?;
    if alpha < 1e-8 {
        return Err(Error::InvalidSchedule(format!(
            "signal amplitude {alpha} at t={t} too small for a clean estimate"
        )));
    }
    let clean = match mode {
        CleanEstimate::OneStep => {
            let eps = model.predict_noise(&state.z, schedule.fraction(t), &state.conditioning)?;
            ((&state.z - (eps * schedule.sigma(t)?)?)? / alpha)?
        }
        CleanEstimate::FullDenoise => {
            let mut z = state.z.clone();
            for step in (1..=t).rev() {
                let eps = model.predict_noise(&z, schedule.fraction(step), &state.conditioning)?;
                z = ddim::ddim_transfer(&z, &eps, step, step - 1, schedule)?;
            }
            z
        }
    };
    model.decode_latent(&clean)
}

/// `1 - cos(a, b)` as a differentiable scalar; errors on zero-norm inputs.
pub fn cosine_distance(a: &Tensor, b: &Tensor, what: &'static str) -> Result<Tensor> {
    let na = a.sqr()?.sum_all()?.sqrt()?;
    let nb = b.sqr()?.sum_all()?.sqrt()?;
    if tensor::scalar(&na)? < 1e-12 || tensor::scalar(&nb)? < 1e-12 {
        return Err(Error::ZeroEmbedding(what));
    }
    let cos = ((a * b)?.sum_all()? / (na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?)
}

/// `1 - cos(E_I(image), E_T(prompt))`, in `[0, 2]`.
pub fn clip_global_loss(image: &Tensor, edit_prompt: &str, encoder: &dyn DualEncoder) -> Result<f64> {
    if edit_prompt.trim().is_empty() {
        return Err(Error::ZeroEmbedding("empty edit prompt"));
    }
    let image_emb = encoder.encode_image(image)?;
    let text_emb = encoder.encode_text(edit_prompt)?;
    tensor::scalar(&cosine_distance(&image_emb, &text_emb, "image or text embedding")?)
}

/// `1 - cos(dI, dT)` where `dI = E_I(edited) - E_I(source)` and
/// `dT = E_T(P_e) - E_T(P_o)`.
pub fn clip_directional_loss(
    image_source: &Tensor,
    image_edited: &Tensor,
    prompt_original: &str,
    prompt_edit: &str,
    encoder: &dyn DualEncoder,
) -> Result<f64> {
    let delta_text = (encoder.encode_text(prompt_edit)? - encoder.encode_text(prompt_original)?)?;
    if tensor::l2_norm(&delta_text)? < 1e-12 {
        return Err(Error::DegenerateDirection("text direction is zero"));
    }
    let delta_image = (encoder.encode_image(image_edited)? - encoder.encode_image(image_source)?)?;
    if tensor::l2_norm(&delta_image)? < 1e-12 {
        return Err(Error::DegenerateDirection("image direction is zero"));
    }
    tensor::scalar(&cosine_distance(&delta_image, &delta_text, "direction")?)
}

/// Where the reference features of the motion supervision loss come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// `sg(F_q(z_t^0))`: features of the latent before optimization. The
    /// minimizer is always a one-unit shift of the original content, so
    /// displacement does not accumulate across iterations.
    OriginalLatent,
    /// `sg(F_q(z_t^k))`: features of the current latent, as in earlier drag
    /// frameworks.
    #[default]
    CurrentLatent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchCenter {
    #[default]
    CurrentHandle,
    OriginalHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSupervision {
    pub radius: usize,
    pub reference: ReferenceSource,
    pub patch_center: PatchCenter,
}

impl Default for MotionSupervision {
    fn default() -> Self {
        Self {
            radius: 4,
            reference: ReferenceSource::default(),
            patch_center: PatchCenter::default(),
        }
    }
}

/// Maps user (image-space) points onto the grid the features live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointFrame {
    pub image: Dims,
    pub features: Dims,
}

impl PointFrame {
    pub fn identity(dims: Dims) -> Self {
        Self {
            image: dims,
            features: dims,
        }
    }

    pub fn to_features(&self, p: PixelPoint) -> PixelPoint {
        to_feature_coords(p, self.image, self.features)
    }

    pub fn to_image(&self, p: PixelPoint) -> PixelPoint {
        to_feature_coords(p, self.features, self.image)
    }
}

/// Sampling positions of the motion supervision loss for every pair:
/// `(q + d_i, q)` for `q` in the patch.
fn supervision_points(
    pairs: &[DragPair],
    original_handles: &[PixelPoint],
    frame: PointFrame,
    cfg: &MotionSupervision,
) -> Result<(Vec<PixelPoint>, Vec<PixelPoint>)> {
    if original_handles.len() != pairs.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![pairs.len()],
            actual: vec![original_handles.len()],
        });
    }
    let mut shifted = Vec::new();
    let mut anchors = Vec::new();
    for (i, (pair, original)) in pairs.iter().zip(original_handles).enumerate() {
        if !pair.active {
            return Err(Error::InactivePair(i));
        }
        let handle = frame.to_features(pair.handle);
        let [dx, dy] = unit_direction(handle, frame.to_features(pair.target))?;
        let center = match cfg.patch_center {
            PatchCenter::CurrentHandle => handle,
            PatchCenter::OriginalHandle => frame.to_features(*original),
        };
        for q in patch_points(center, cfg.radius, frame.features) {
            shifted.push(q.offset(dx, dy));
            anchors.push(q);
        }
    }
    Ok((shifted, anchors))
}

/// Sum over pairs and patch points of `|| F_{q+d}(z^k) - sg(F_q(ref)) ||`.
///
/// `features` are the current features `(1, C, H, W)`; `reference` the
/// original-latent features, ignored under [`ReferenceSource::CurrentLatent`].
/// Reference values never receive gradient.
pub fn motion_supervision_loss(
    features: &Tensor,
    reference: &Tensor,
    pairs: &[DragPair],
    original_handles: &[PixelPoint],
    frame: PointFrame,
    cfg: &MotionSupervision,
) -> Result<Tensor> {
    let (shifted, anchors) = supervision_points(pairs, original_handles, frame, cfg)?;
    let reference = match cfg.reference {
        ReferenceSource::OriginalLatent => reference.detach(),
        ReferenceSource::CurrentLatent => features.detach(),
    };
    let moved = sample_tensor(features, &shifted)?;
    let anchored = sample_tensor(&reference, &anchors)?.detach();
    let squared = (moved - anchored)?.sqr()?.sum(1)?;
    // the norm is not differentiable at 0; exactly matched points contribute
    // zero with zero subgradient
    let nonzero: Vec<f64> = tensor::to_vec(&squared)?
        .into_iter()
        .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mask = tensor::from_vec(nonzero, &[anchors.len()])?;
    let safe = (&squared + mask.affine(-1.0, 1.0)?)?.sqrt()?;
    Ok((safe * mask)?.sum_all()?)
}

/// Features of `z` resized onto the latent grid.
pub fn latent_features(model: &dyn Denoiser, state: &LatentState, schedule: &NoiseSchedule) -> Result<Tensor> {
    let features = model.extract_features(
        &state.z,
        schedule.fraction(state.timestep_index),
        &state.conditioning,
    )?;
    resize_features(&features, model.latent_shape().dims)
}

fn gradient_of(
    state: &LatentState,
    source: GradientSource,
    loss_fn: impl FnOnce(&LatentState) -> Result<Tensor>,
) -> Result<(GradientField, f64)> {
    let z = Var::from_tensor(&state.z)?;
    let tracked = state.with_z(z.as_tensor().clone());
    let loss = loss_fn(&tracked)?;
    let value = tensor::scalar(&loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{source:?} loss")));
    }
    let grads = loss.backward()?;
    let field = match grads.get(z.as_tensor()) {
        Some(g) => GradientField::from_tensor(g, source)?,
        None => GradientField::zeros(state.z.dims(), source),
    };
    Ok((field, value))
}

/// `G_l = dL_ms / dz^k` and the loss value.
#[allow(clippy::too_many_arguments)]
pub fn local_gradient(
    state: &LatentState,
    reference_features: &Tensor,
    pairs: &[DragPair],
    original_handles: &[PixelPoint],
    frame: PointFrame,
    cfg: &MotionSupervision,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(GradientField, f64)> {
    gradient_of(state, GradientSource::Local, |s| {
        let features = latent_features(model, s, schedule)?;
        motion_supervision_loss(&features, reference_features, pairs, original_handles, frame, cfg)
    })
}

/// `G_g = dL_global / dz^k` through the clean estimate and the image encoder.
pub fn global_gradient(
    state: &LatentState,
    edit_prompt: &str,
    model: &dyn Denoiser,
    encoder: &dyn DualEncoder,
    schedule: &NoiseSchedule,
    mode: CleanEstimate,
) -> Result<(GradientField, f64)> {
    let text = encoder.encode_text(edit_prompt)?.detach();
    gradient_of(state, GradientSource::Global, |s| {
        let image = estimate_clean_image(s, model, schedule, mode)?;
        cosine_distance(&encoder.encode_image(&image)?, &text, "image or text embedding")
    })
}
