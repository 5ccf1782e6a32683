//! Handle relocation after a latent update: nearest-neighbour point tracking
//! and its distance-filtered fast variant.
//!
//! All points here live on the feature grid.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    bilinear_sample, euclidean_distance, patch_points, Dims, DragPair, FeatureMap, PixelPoint,
};

pub const DEFAULT_SEARCH_RADIUS: usize = 12;
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackingStrategy {
    Pt,
    #[default]
    Fpt,
}

/// Which point of the original feature map supplies the reference feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingReference {
    /// `F_{h^0}(z^0)`: the content originally under the handle.
    #[default]
    OriginalHandle,
    /// `F_{h^k}(z^0)`: the original map read at the current handle.
    CurrentHandle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingStep {
    pub pair_index: usize,
    pub old_handle: PixelPoint,
    pub new_handle: PixelPoint,
    pub candidate_count: usize,
    pub feature_distance: Option<f64>,
    pub strategy: TrackingStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutcome {
    pub point: PixelPoint,
    pub candidate_count: usize,
    /// Feature distance at the returned point; `None` when no candidate was
    /// kept.
    pub feature_distance: Option<f64>,
}

/// Per-job tracking inputs that stay fixed across iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub radius: usize,
    pub strategy: TrackingStrategy,
    pub reference: TrackingReference,
    pub threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_SEARCH_RADIUS,
            strategy: TrackingStrategy::default(),
            reference: TrackingReference::default(),
            threshold: DEFAULT_CONVERGENCE_THRESHOLD,
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Reference feature for a pair, read from the original map.
pub fn reference_feature(
    features_0: &FeatureMap,
    handle_0: PixelPoint,
    handle_k: PixelPoint,
    mode: TrackingReference,
) -> Vec<f64> {
    match mode {
        TrackingReference::OriginalHandle => bilinear_sample(features_0, handle_0),
        TrackingReference::CurrentHandle => bilinear_sample(features_0, handle_k),
    }
}

/// Best match for `reference` among `candidates`; ties go to the candidate
/// closest to `target`, then to the earliest in row-major order.
pub fn best_match(
    features: &FeatureMap,
    reference: &[f64],
    candidates: &[PixelPoint],
    target: PixelPoint,
) -> Option<(PixelPoint, f64)> {
    let mut best: Option<(PixelPoint, f64, f64)> = None;
    for &a in candidates {
        let d = squared_distance(&features.vector_at(a.y as usize, a.x as usize), reference);
        let to_target = euclidean_distance(a, target);
        let better = match best {
            None => true,
            Some((_, bd, bt)) => d < bd || (d == bd && to_target < bt),
        };
        if better {
            best = Some((a, d, to_target));
        }
    }
    best.map(|(p, d, _)| (p, d.sqrt()))
}

fn track(
    features_k1: &FeatureMap,
    reference: &[f64],
    handle_k: PixelPoint,
    target: PixelPoint,
    radius: usize,
    filter: bool,
) -> TrackOutcome {
    let mut candidates = patch_points(handle_k, radius, features_k1.dims());
    if filter {
        let current = euclidean_distance(handle_k, target);
        candidates.retain(|&a| euclidean_distance(a, target) < current);
    }
    match best_match(features_k1, reference, &candidates, target) {
        Some((point, distance)) => TrackOutcome {
            point,
            candidate_count: candidates.len(),
            feature_distance: Some(distance),
        },
        None => TrackOutcome {
            point: handle_k,
            candidate_count: 0,
            feature_distance: None,
        },
    }
}

/// Unrestricted nearest-neighbour search in the box of `radius` around
/// `handle_k`.
pub fn track_point_nn(
    features_k1: &FeatureMap,
    reference: &[f64],
    handle_k: PixelPoint,
    target: PixelPoint,
    radius: usize,
) -> TrackOutcome {
    track(features_k1, reference, handle_k, target, radius, false)
}

/// Nearest-neighbour search over the candidates strictly closer to `target`
/// than `handle_k`; keeps `handle_k` when none are.
pub fn track_point_fast(
    features_k1: &FeatureMap,
    reference: &[f64],
    handle_k: PixelPoint,
    target: PixelPoint,
    radius: usize,
) -> TrackOutcome {
    track(features_k1, reference, handle_k, target, radius, true)
}

/// Tracks every active pair and deactivates those within `cfg.threshold` of
/// their target.
pub fn update_handles(
    pairs: &[DragPair],
    original_handles: &[PixelPoint],
    features_k1: &FeatureMap,
    features_0: &FeatureMap,
    cfg: &TrackerConfig,
) -> (Vec<DragPair>, Vec<TrackingStep>) {
    let mut next = pairs.to_vec();
    let mut steps = Vec::new();
    for (i, pair) in next.iter_mut().enumerate() {
        if !pair.active {
            continue;
        }
        let reference = reference_feature(features_0, original_handles[i], pair.handle, cfg.reference);
        let outcome = match cfg.strategy {
            TrackingStrategy::Pt => track_point_nn(features_k1, &reference, pair.handle, pair.target, cfg.radius),
            TrackingStrategy::Fpt => track_point_fast(features_k1, &reference, pair.handle, pair.target, cfg.radius),
        };
        steps.push(TrackingStep {
            pair_index: i,
            old_handle: pair.handle,
            new_handle: outcome.point,
            candidate_count: outcome.candidate_count,
            feature_distance: outcome.feature_distance,
            strategy: cfg.strategy,
        });
        pair.handle = outcome.point;
        if is_converged(pair, cfg.threshold) {
            pair.active = false;
        }
    }
    (next, steps)
}

/// A pair is done once its handle is within `threshold` of the target, or
/// exactly on it.
pub fn is_converged(pair: &DragPair, threshold: f64) -> bool {
    let d = pair.distance();
    d < threshold || d == 0.0
}

/// Deactivates pairs already within `threshold` of their targets.
pub fn deactivate_converged(pairs: &mut [DragPair], threshold: f64) {
    for pair in pairs.iter_mut() {
        if is_converged(pair, threshold) {
            pair.active = false;
        }
    }
}

/// Number of integer grid points strictly closer to `target` than `handle`;
/// bounds the relocations a fast tracker can make.
pub fn relocation_bound(handle: PixelPoint, target: PixelPoint, dims: Dims) -> usize {
    let limit = euclidean_distance(handle, target);
    let mut count = 0;
    for y in 0..dims.height {
        for x in 0..dims.width {
            if euclidean_distance(PixelPoint::new(x as f64, y as f64), target) < limit {
                count += 1;
            }
        }
    }
    count
}
