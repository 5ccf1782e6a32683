use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving noise schedule over `num_steps + 1` timestep indices.
///
/// `alphas[t]` is the signal amplitude and `sigmas[t]` the noise amplitude of
/// `z_t = alpha_t * z_0 + sigma_t * eps`, so `alpha_t^2 + sigma_t^2 = 1`.
/// In cumulative-product notation `alpha_t = sqrt(abar_t)`. Index 0 is the
/// clean sample (`alpha_0 = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub num_steps: usize,
}

/// Largest angle reached by [`NoiseSchedule::cosine`]; the final signal
/// amplitude is `cos(1.2) ~ 0.36`.
pub const DEFAULT_MAX_ANGLE: f64 = 1.2;

impl NoiseSchedule {
    /// Cosine schedule: `alpha_t = cos(phi_t)`, `sigma_t = sin(phi_t)` with
    /// `phi_t` growing linearly from 0 to `max_angle`.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        Self::cosine_with_angle(num_steps, DEFAULT_MAX_ANGLE)
    }

    pub fn cosine_with_angle(num_steps: usize, max_angle: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be at least 1".into()));
        }
        if !(max_angle > 0.0 && max_angle < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidSchedule(format!(
                "max angle {max_angle} outside (0, pi/2)"
            )));
        }
        let phis = (0..=num_steps).map(|t| max_angle * t as f64 / num_steps as f64);
        let (alphas, sigmas) = phis.map(|phi| (phi.cos(), phi.sin())).unzip();
        Self::from_parts(alphas, sigmas)
    }

    /// Builds a schedule from signal amplitudes, deriving `sigma = sqrt(1 - alpha^2)`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Self::from_parts(alphas, sigmas)
    }

    /// Like [`Self::from_alphas`] but allows equal neighbours. Only used to
    /// exercise degenerate algebra in tests and diagnostics.
    pub fn flat(alpha: f64, num_steps: usize) -> Self {
        let sigma = (1.0 - alpha * alpha).sqrt();
        Self {
            alphas: vec![alpha; num_steps + 1],
            sigmas: vec![sigma; num_steps + 1],
            num_steps,
        }
    }

    pub fn from_parts(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        let schedule = Self {
            num_steps: alphas.len().saturating_sub(1),
            alphas,
            sigmas,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.num_steps + 1 || self.sigmas.len() != self.alphas.len() {
            return Err(Error::InvalidSchedule("length mismatch".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be at least 1".into()));
        }
        for (t, (&a, &s)) in self.alphas.iter().zip(&self.sigmas).enumerate() {
            if !(a > 0.0 && a <= 1.0) || !(0.0..1.0).contains(&s) {
                return Err(Error::InvalidSchedule(format!(
                    "entry {t} out of range: alpha {a}, sigma {s}"
                )));
            }
            if (a * a + s * s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSchedule(format!(
                    "entry {t} is not variance preserving"
                )));
            }
        }
        if self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule(
                "alphas must decrease strictly with t".into(),
            ));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.sigmas[t])
    }

    /// Position of `t` on the unit diffusion horizon, as fed to denoisers.
    pub fn fraction(&self, t: usize) -> f64 {
        t as f64 / self.num_steps as f64
    }

    /// Number of steps applied for an inversion `strength` in (0, 1].
    pub fn steps_for_strength(&self, strength: f64) -> Result<usize> {
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "strength {strength} outside (0, 1]"
            )));
        }
        // tolerate representation error such as 0.7 * 50 = 35.000000000000004
        let raw = strength * self.num_steps as f64;
        Ok(((raw - 1e-9).ceil() as usize).clamp(1, self.num_steps))
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.num_steps {
            Err(Error::TimestepOutOfRange {
                index: t,
                num_steps: self.num_steps,
            })
        } else {
            Ok(())
        }
    }
}
