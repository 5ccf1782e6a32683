//! Deterministic DDIM inversion and sampling.
//!
//! With signal amplitude `a_t` and noise amplitude `s_t` one inversion step is
//!
//! ```text
//! z_{t+1} = a_{t+1} * (z_t - s_t * eps(z_t)) / a_t + s_{t+1} * eps(z_t)
//! ```
//!
//! and a sampling step is the same map run from `t` to `t - 1`. Both are
//! exact inverses of each other when they share the noise estimate.

use candle_core::Tensor;

use super::{Denoiser, LatentState, NoiseSchedule};
use crate::error::{Error, Result};

pub(crate) fn check_finite(t: &Tensor, context: &str) -> Result<()> {
    let energy = t.sqr()?.sum_all()?.to_scalar::<f64>()?;
    if energy.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Moves `z` from timestep `from` to `to` along the deterministic DDIM path
/// defined by the noise estimate `eps`.
pub fn ddim_transfer(
    z: &Tensor,
    eps: &Tensor,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let (a_from, s_from) = (schedule.alpha(from)?, schedule.sigma(from)?);
    let (a_to, s_to) = (schedule.alpha(to)?, schedule.sigma(to)?);
    let clean = ((z - (eps * s_from)?)? / a_from)?;
    Ok(((clean * a_to)? + (eps * s_to)?)?)
}

fn noise_at(state: &LatentState, model: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<Tensor> {
    let eps = model.predict_noise(
        &state.z,
        schedule.fraction(state.timestep_index),
        &state.conditioning,
    )?;
    check_finite(&eps, "denoiser noise prediction")?;
    Ok(eps)
}

pub fn ddim_invert_step(
    state: &LatentState,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let t = state.timestep_index;
    if t + 1 > schedule.num_steps {
        return Err(Error::TimestepOutOfRange {
            index: t + 1,
            num_steps: schedule.num_steps,
        });
    }
    let eps = noise_at(state, model, schedule)?;
    let z = ddim_transfer(&state.z, &eps, t, t + 1, schedule)?;
    Ok(LatentState {
        z,
        timestep_index: t + 1,
        ..state.clone()
    })
}

pub fn ddim_denoise_step(
    state: &LatentState,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let t = state.timestep_index;
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            index: 0,
            num_steps: schedule.num_steps,
        });
    }
    let eps = noise_at(state, model, schedule)?;
    let z = ddim_transfer(&state.z, &eps, t, t - 1, schedule)?;
    Ok(LatentState {
        z,
        timestep_index: t - 1,
        ..state.clone()
    })
}

/// Noise estimates recorded during an inversion, index `i` belonging to the
/// step that left timestep `i`.
#[derive(Debug, Clone, Default)]
pub struct InversionTrace {
    pub noises: Vec<Tensor>,
}

/// Inverts a clean latent by `ceil(strength * num_steps)` DDIM steps.
pub fn invert_to_strength(
    z0: &Tensor,
    conditioning: &Tensor,
    strength: f64,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    Ok(invert_with_trace(z0, conditioning, strength, model, schedule)?.0)
}

pub fn invert_with_trace(
    z0: &Tensor,
    conditioning: &Tensor,
    strength: f64,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<(LatentState, InversionTrace)> {
    let steps = schedule.steps_for_strength(strength)?;
    let mut state = LatentState::new(z0.clone(), 0, conditioning.clone());
    let mut trace = InversionTrace::default();
    for t in 0..steps {
        let eps = noise_at(&state, model, schedule)?;
        state.z = ddim_transfer(&state.z, &eps, t, t + 1, schedule)?;
        state.timestep_index = t + 1;
        trace.noises.push(eps);
    }
    Ok((state, trace))
}

/// Standard deterministic sampling from `state.timestep_index` down to 0.
pub fn denoise_to_clean(
    state: &LatentState,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut state = state.clone();
    while state.timestep_index > 0 {
        state = ddim_denoise_step(&state, model, schedule)?;
    }
    Ok(state.z)
}

/// Sampling that replays the inversion's noise estimates in reverse, which
/// undoes the inversion up to floating-point error.
pub fn denoise_with_trace(
    state: &LatentState,
    trace: &InversionTrace,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut z = state.z.clone();
    for t in (1..=state.timestep_index).rev() {
        let eps = trace.noises.get(t - 1).ok_or(Error::TimestepOutOfRange {
            index: t,
            num_steps: trace.noises.len(),
        })?;
        z = ddim_transfer(&z, eps, t, t - 1, schedule)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::toy::{make_toy_backend, ToyConfig};
    use crate::diffusion::{DenoiserOutput, LatentShape};
    use crate::geometry::Dims;
    use candle_core::Device;

    struct ZeroNoise(LatentShape);

    impl Denoiser for ZeroNoise {
        fn forward(&self, z: &Tensor, _t: f64, _c: &Tensor) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput {
                noise: z.zeros_like()?,
                features: z.clone(),
            })
        }
        fn latent_shape(&self) -> LatentShape {
            self.0
        }
        fn image_dims(&self) -> Dims {
            self.0.dims
        }
        fn embed_prompt(&self, _p: &str) -> Result<Tensor> {
            Ok(Tensor::zeros(1, candle_core::DType::F64, &Device::Cpu)?)
        }
        fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
            Ok(image.clone())
        }
        fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
            Ok(z.clone())
        }
    }

    fn rand_latent(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (1, 3, 8, 8), &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    fn zero_model() -> ZeroNoise {
        ZeroNoise(LatentShape {
            channels: 3,
            dims: Dims::new(8, 8),
        })
    }

    #[test]
    fn flat_schedule_is_identity() {
        let schedule = NoiseSchedule::flat(0.8, 4);
        let (model, _) = make_toy_backend(3, ToyConfig::small(8)).unwrap();
        let state = LatentState::new(rand_latent(1), 1, model.embed_prompt("a").unwrap());
        let next = ddim_invert_step(&state, &model, &schedule).unwrap();
        assert!(max_abs_diff(&next.z, &state.z) < 1e-12);
        assert_eq!(next.timestep_index, 2);
    }

    #[test]
    fn zero_noise_scales_by_alpha_ratio() {
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let model = zero_model();
        let z = rand_latent(2);
        let state = LatentState::new(z.clone(), 3, model.embed_prompt("").unwrap());
        let up = ddim_invert_step(&state, &model, &schedule).unwrap();
        let ratio = schedule.alphas[4] / schedule.alphas[3];
        assert!(max_abs_diff(&up.z, &(&z * ratio).unwrap()) < 1e-12);
        let down = ddim_denoise_step(&state, &model, &schedule).unwrap();
        let ratio = schedule.alphas[2] / schedule.alphas[3];
        assert!(max_abs_diff(&down.z, &(&z * ratio).unwrap()) < 1e-12);
    }

    #[test]
    fn frozen_noise_step_is_invertible() {
        let schedule = NoiseSchedule::cosine(50).unwrap();
        let z = rand_latent(3);
        let eps = rand_latent(4);
        for t in [0, 10, 34, 49] {
            let up = ddim_transfer(&z, &eps, t, t + 1, &schedule).unwrap();
            let back = ddim_transfer(&up, &eps, t + 1, t, &schedule).unwrap();
            assert!(max_abs_diff(&back, &z) < 1e-6);
        }
    }

    #[test]
    fn strength_controls_reached_timestep() {
        let schedule = NoiseSchedule::cosine(50).unwrap();
        let model = zero_model();
        let cond = model.embed_prompt("").unwrap();
        let state = invert_to_strength(&rand_latent(5), &cond, 0.7, &model, &schedule).unwrap();
        assert_eq!(state.timestep_index, 35);
        let state = invert_to_strength(&rand_latent(5), &cond, 1.0, &model, &schedule).unwrap();
        assert_eq!(state.timestep_index, 50);
    }

    #[test]
    fn denoising_from_strength_touches_each_step_once() {
        let schedule = NoiseSchedule::cosine(50).unwrap();
        let model = zero_model();
        let cond = model.embed_prompt("").unwrap();
        let mut state = invert_to_strength(&rand_latent(6), &cond, 0.7, &model, &schedule).unwrap();
        let mut touched = 0;
        while state.timestep_index > 0 {
            state = ddim_denoise_step(&state, &model, &schedule).unwrap();
            touched += 1;
        }
        assert_eq!(touched, 35);
        assert!(ddim_denoise_step(&state, &model, &schedule).is_err());
    }

    #[test]
    fn tiny_strength_is_near_identity() {
        let (model, schedule) = make_toy_backend(9, ToyConfig::small(8)).unwrap();
        let z = rand_latent(7);
        let cond = model.embed_prompt("x").unwrap();
        let state = invert_to_strength(&z, &cond, 1e-6, &model, &schedule).unwrap();
        assert_eq!(state.timestep_index, 1);
        let rel = max_abs_diff(&state.z, &z);
        assert!(rel < 0.1, "{rel}");
    }

    #[test]
    fn traced_round_trip_is_tight() {
        let (model, schedule) = make_toy_backend(11, ToyConfig::small(8)).unwrap();
        let z = rand_latent(8);
        let cond = model.embed_prompt("a toy").unwrap();
        let (state, trace) = invert_with_trace(&z, &cond, 1.0, &model, &schedule).unwrap();
        let back = denoise_with_trace(&state, &trace, &schedule).unwrap();
        let rel = crate::tensor::relative_l2(&back, &z).unwrap();
        assert!(rel < 1e-3, "{rel}");
    }
}
