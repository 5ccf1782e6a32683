//! Global-local gradient fusion and the latent update step.

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentState;
use crate::error::{ensure_finite, Error, Result};
use crate::guidance::{GradientField, GradientSource};
use crate::image_io::Mask;
use crate::tensor;

/// Below this norm a gradient counts as absent.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// `G_l + λ sin·G_g` when `cos >= 0`, `G_l - λ cos·G_g` otherwise.
    #[default]
    AngleGated,
    /// Same case split, but adds only the perpendicular (identity) part of
    /// `G_g` when consistent and only its parallel (edit) part otherwise.
    Projection,
    /// `G_l + λ G_g`.
    Add,
    /// `G_l` when consistent; on conflict, `G_l` minus `λ` times its
    /// projection onto `G_g`.
    ProGrad,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::AngleGated,
        FusionVariant::Projection,
        FusionVariant::Add,
        FusionVariant::ProGrad,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionBranch {
    Consistent,
    Contradictory,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionDiagnostics {
    pub cos_angle: f64,
    pub sin_angle: f64,
    pub branch: FusionBranch,
    pub global_norm: f64,
    pub local_norm: f64,
    pub lambda: f64,
    pub variant: FusionVariant,
}

fn check_shapes(a: &GradientField, b: &GradientField) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            expected: a.shape.clone(),
            actual: b.shape.clone(),
        });
    }
    Ok(())
}

/// Cosine of the angle between two flattened fields, clamped into `[-1, 1]`.
/// Returns `None` when either field is degenerate.
pub fn cosine_between(global: &GradientField, local: &GradientField) -> Result<Option<f64>> {
    check_shapes(global, local)?;
    let (ng, nl) = (global.norm(), local.norm());
    if ng < DEGENERATE_NORM || nl < DEGENERATE_NORM {
        return Ok(None);
    }
    Ok(Some(
        (tensor::dot(&global.values, &local.values) / (ng * nl)).clamp(-1.0, 1.0),
    ))
}

fn combine(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// Fuses `G_g` (global) into `G_l` (local) under `variant`.
pub fn fuse_gradients(
    global: &GradientField,
    local: &GradientField,
    lambda: f64,
    variant: FusionVariant,
) -> Result<(GradientField, FusionDiagnostics)> {
    let cos = cosine_between(global, local)?;
    let (ng, nl) = (global.norm(), local.norm());
    let mut diag = FusionDiagnostics {
        cos_angle: cos.unwrap_or(0.0),
        sin_angle: cos.map_or(1.0, |c| (1.0 - c * c).max(0.0).sqrt()),
        branch: FusionBranch::Degenerate,
        global_norm: ng,
        local_norm: nl,
        lambda,
        variant,
    };
    let (g, l) = (&global.values, &local.values);
    let values = match cos {
        None => combine(l, 1.0, g, lambda),
        Some(c) => {
            let s = diag.sin_angle;
            diag.branch = if c >= 0.0 {
                FusionBranch::Consistent
            } else {
                FusionBranch::Contradictory
            };
            let consistent = c >= 0.0;
            match variant {
                FusionVariant::AngleGated if consistent => combine(l, 1.0, g, lambda * s),
                FusionVariant::AngleGated => combine(l, 1.0, g, -lambda * c),
                FusionVariant::Projection => {
                    // parallel part of G_g along G_l: (g.l / |l|^2) l
                    let along = tensor::dot(g, l) / (nl * nl);
                    let parallel: Vec<f64> = l.iter().map(|v| along * v).collect();
                    if consistent {
                        let perpendicular = combine(g, 1.0, &parallel, -1.0);
                        combine(l, 1.0, &perpendicular, lambda)
                    } else {
                        combine(l, 1.0, &parallel, lambda)
                    }
                }
                FusionVariant::Add => combine(l, 1.0, g, lambda),
                FusionVariant::ProGrad if consistent => l.clone(),
                FusionVariant::ProGrad => {
                    let along = tensor::dot(g, l) / (ng * ng);
                    combine(l, 1.0, g, -lambda * along)
                }
            }
        }
    };
    let fused = GradientField::new(local.shape.clone(), values, GradientSource::Fused)?;
    Ok((fused, diag))
}

/// Quadratic pull of non-editable latent cells back to the starting latent:
/// `weight * || (z - z0) * (1 - M) ||^2`.
#[derive(Debug, Clone)]
pub struct MaskPenalty {
    pub origin: Vec<f64>,
    /// 1 on frozen cells, 0 on editable ones, laid out like the latent.
    pub frozen: Vec<f64>,
    pub weight: f64,
}

impl MaskPenalty {
    /// Builds the penalty for a `(1, C, h, w)` latent from a mask already
    /// resampled to `(h, w)`.
    pub fn new(origin: &LatentState, mask: &Mask, weight: f64) -> Result<Self> {
        let dims = origin.z.dims().to_vec();
        let (channels, h, w) = match dims.as_slice() {
            [1, c, h, w] => (*c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![1, 0, mask.height, mask.width],
                    actual: dims,
                })
            }
        };
        if (mask.height, mask.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                actual: vec![mask.height, mask.width],
            });
        }
        let plane: Vec<f64> = mask
            .editable
            .iter()
            .map(|&e| if e { 0.0 } else { 1.0 })
            .collect();
        Ok(Self {
            origin: origin.values()?,
            frozen: plane.repeat(channels),
            weight,
        })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.weight
            * z.iter()
                .zip(&self.origin)
                .zip(&self.frozen)
                .map(|((a, b), m)| ((a - b) * m).powi(2))
                .sum::<f64>()
    }

    /// `2 w (z - z0) (1 - M)`; the mask is binary so `(1 - M)^2 = 1 - M`.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.origin)
            .zip(&self.frozen)
            .map(|((a, b), m)| 2.0 * self.weight * (a - b) * m)
            .collect()
    }
}

/// `z <- z - lr (G + mask penalty gradient)`, advancing the iteration counter.
pub fn apply_update(
    state: &LatentState,
    gradient: &GradientField,
    lr: f64,
    penalty: Option<&MaskPenalty>,
) -> Result<LatentState> {
    if state.z.dims() != gradient.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: state.z.dims().to_vec(),
            actual: gradient.shape.clone(),
        });
    }
    let z = state.values()?;
    let mut step = gradient.values.clone();
    if let Some(p) = penalty {
        for (s, extra) in step.iter_mut().zip(p.gradient(&z)) {
            *s += extra;
        }
    }
    let updated: Vec<f64> = z.iter().zip(&step).map(|(v, g)| v - lr * g).collect();
    ensure_finite(&updated, "updated latent")?;
    let mut next = state.with_z(tensor::from_vec(updated, &gradient.shape)?);
    next.iteration = state.iteration + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dims;
    use proptest::prelude::*;

    fn field(values: &[f64], source: GradientSource) -> GradientField {
        GradientField::new(vec![values.len()], values.to_vec(), source).unwrap()
    }

    fn fuse(g: &[f64], l: &[f64], variant: FusionVariant) -> (Vec<f64>, FusionDiagnostics) {
        let (f, d) = fuse_gradients(
            &field(g, GradientSource::Global),
            &field(l, GradientSource::Local),
            0.7,
            variant,
        )
        .unwrap();
        (f.values, d)
    }

    #[test]
    fn worked_examples() {
        let (v, d) = fuse(&[0.0, 2.0], &[1.0, 0.0], FusionVariant::AngleGated);
        assert_eq!(d.branch, FusionBranch::Consistent);
        assert_eq!((d.cos_angle, d.sin_angle), (0.0, 1.0));
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 1.4).abs() < 1e-15);

        let (v, d) = fuse(&[-1.0, 0.0], &[1.0, 0.0], FusionVariant::AngleGated);
        assert_eq!(d.branch, FusionBranch::Contradictory);
        assert!((v[0] - 0.3).abs() < 1e-15 && v[1] == 0.0);

        let (v, d) = fuse(&[0.0, 0.0], &[1.0, -2.0], FusionVariant::AngleGated);
        assert_eq!(d.branch, FusionBranch::Degenerate);
        assert_eq!(v, vec![1.0, -2.0]);

        let (v, _) = fuse(&[3.0, 1.0], &[0.0, 0.0], FusionVariant::AngleGated);
        assert!((v[0] - 2.1).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        let l = field(&[1.0, 2.0], GradientSource::Local);
        let c = |g: &[f64]| cosine_between(&field(g, GradientSource::Global), &l).unwrap().unwrap();
        assert!((c(&[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(c(&[-2.0, 1.0]), 0.0);
        assert!((c(&[-1.0, -2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = field(&[1.0, 2.0, 3.0], GradientSource::Global);
        let l = field(&[1.0, 2.0], GradientSource::Local);
        assert!(fuse_gradients(&g, &l, 0.7, FusionVariant::AngleGated).is_err());
    }

    #[test]
    fn projection_variant_splits_components() {
        // G_g = (1, 1) against G_l = (1, 0): perpendicular part (0, 1)
        let (v, _) = fuse(&[1.0, 1.0], &[1.0, 0.0], FusionVariant::Projection);
        assert!((v[0] - 1.0).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
        // G_g = (-1, 1): parallel part (-1, 0)
        let (v, _) = fuse(&[-1.0, 1.0], &[1.0, 0.0], FusionVariant::Projection);
        assert!((v[0] - 0.3).abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn prograd_variant() {
        let (v, _) = fuse(&[1.0, 1.0], &[1.0, 0.0], FusionVariant::ProGrad);
        assert_eq!(v, vec![1.0, 0.0]);
        // conflict: l.g / |g|^2 = -1/2, so l + 0.7 * 0.5 * g
        let (v, _) = fuse(&[-1.0, 1.0], &[1.0, 0.0], FusionVariant::ProGrad);
        assert!((v[0] - 0.65).abs() < 1e-15 && (v[1] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn update_identities_and_descent() {
        let z = tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0], &[1, 1, 2, 2]).unwrap();
        let state = LatentState::new(z, 3, tensor::from_vec(vec![0.0], &[1]).unwrap());
        let zero = GradientField::zeros(&[1, 1, 2, 2], GradientSource::Fused);
        let same = apply_update(&state, &zero, 0.1, None).unwrap();
        assert_eq!(same.values().unwrap(), state.values().unwrap());
        assert_eq!(same.iteration, 1);

        // bowl f(z) = |z|^2 with gradient 2z
        let values = state.values().unwrap();
        let grad = GradientField::new(
            vec![1, 1, 2, 2],
            values.iter().map(|v| 2.0 * v).collect(),
            GradientSource::Fused,
        )
        .unwrap();
        let frozen = apply_update(&state, &grad, 0.0, None).unwrap();
        assert_eq!(frozen.values().unwrap(), values);
        let next = apply_update(&state, &grad, 0.1, None).unwrap();
        let f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(f(&next.values().unwrap()) < f(&values));
    }

    #[test]
    fn mask_penalty_cases() {
        let origin = LatentState::new(
            tensor::from_vec(vec![0.0; 8], &[1, 2, 2, 2]).unwrap(),
            1,
            tensor::from_vec(vec![0.0], &[1]).unwrap(),
        );
        let z = vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0];
        let open = MaskPenalty::new(&origin, &Mask::full(Dims::new(2, 2), true), 0.5).unwrap();
        assert!(open.gradient(&z).iter().all(|&g| g == 0.0));
        let closed = MaskPenalty::new(&origin, &Mask::full(Dims::new(2, 2), false), 0.5).unwrap();
        assert_eq!(closed.gradient(&z), z);

        let mut mask = Mask::full(Dims::new(2, 2), true);
        mask.editable[1] = false;
        let p = MaskPenalty::new(&origin, &mask, 0.3).unwrap();
        let g = p.gradient(&z);
        for i in 0..z.len() {
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (p.value(&hi) - p.value(&lo)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
        assert!(MaskPenalty::new(&origin, &Mask::full(Dims::new(3, 2), true), 0.3).is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
        )
    }

    proptest! {
        #[test]
        fn diagnostics_are_consistent((g, l) in vecs(6)) {
            let (_, d) = fuse(&g, &l, FusionVariant::AngleGated);
            prop_assert!((d.cos_angle.powi(2) + d.sin_angle.powi(2) - 1.0).abs() < 1e-6);
            prop_assert!(d.sin_angle >= 0.0);
            if d.branch != FusionBranch::Degenerate {
                prop_assert_eq!(d.branch == FusionBranch::Consistent, d.cos_angle >= 0.0);
            }
        }

        #[test]
        fn parallel_global_leaves_local((l, _) in vecs(5), k in 0.1..10.0f64) {
            prop_assume!(tensor::norm(&l) > 1e-3);
            let g: Vec<f64> = l.iter().map(|v| k * v).collect();
            let (v, d) = fuse(&g, &l, FusionVariant::AngleGated);
            prop_assert!(d.sin_angle < 1e-6);
            for (a, b) in v.iter().zip(&l) {
                prop_assert!((a - b).abs() < 1e-6 * k.max(1.0) * tensor::norm(&l));
            }
        }

        #[test]
        fn doubling_global_doubles_added_term((g, l) in vecs(4)) {
            prop_assume!(tensor::norm(&g) > 1e-3 && tensor::norm(&l) > 1e-3);
            let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
            let (v1, _) = fuse(&g, &l, FusionVariant::AngleGated);
            let (v2, _) = fuse(&g2, &l, FusionVariant::AngleGated);
            for i in 0..l.len() {
                prop_assert!(((v2[i] - l[i]) - 2.0 * (v1[i] - l[i])).abs() < 1e-9);
            }
        }
    }
}
