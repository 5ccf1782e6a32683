//! Points, patches and bilinear feature sampling.
//!
//! Coordinates follow one convention everywhere in the crate: `x` is the
//! column, `y` is the row, and the origin is the top-left corner. Feature
//! grids are addressed in the same convention after proportional rescaling
//! from image space (see [`to_feature_coords`]).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn rounded(self) -> Self {
        Self::new(self.x.round(), self.y.round())
    }

    pub fn offset(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn in_bounds(self, dims: Dims) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x <= (dims.width - 1) as f64
            && self.y <= (dims.height - 1) as f64
    }
}

/// Spatial extent of an image or grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A handle point whose content should be moved onto its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragPair {
    pub handle: PixelPoint,
    pub target: PixelPoint,
    pub active: bool,
}

impl DragPair {
    pub fn new(handle: PixelPoint, target: PixelPoint) -> Self {
        Self {
            handle,
            target,
            active: true,
        }
    }

    pub fn distance(&self) -> f64 {
        euclidean_distance(self.handle, self.target)
    }
}

/// Dense `channels x height x width` grid, row-major per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, height, width],
                actual: vec![values.len()],
            });
        }
        crate::error::ensure_finite(&values, "feature map")?;
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    /// Accepts `(C, H, W)` or `(1, C, H, W)` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, 0, 0],
                    actual: t.dims().to_vec(),
                })
            }
        };
        let (c, h, w) = t.dims3()?;
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(c, h, w, values)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.values.clone(),
            (self.channels, self.height, self.width),
            &candle_core::Device::Cpu,
        )?)
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Channel vector at an integer grid cell.
    pub fn vector_at(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

/// Unit vector pointing from `handle` to `target`.
pub fn unit_direction(handle: PixelPoint, target: PixelPoint) -> Result<[f64; 2]> {
    let dx = target.x - handle.x;
    let dy = target.y - handle.y;
    let norm = dx.hypot(dy);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroDistance);
    }
    Ok([dx / norm, dy / norm])
}

pub fn euclidean_distance(a: PixelPoint, b: PixelPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Integer grid points of the Chebyshev box of `radius` around the rounded
/// `center`, clipped to `bounds`, in row-major order.
pub fn patch_points(center: PixelPoint, radius: usize, bounds: Dims) -> Vec<PixelPoint> {
    let r = radius as i64;
    let cx = center.x.round() as i64;
    let cy = center.y.round() as i64;
    let (w, h) = (bounds.width as i64, bounds.height as i64);
    let x_range = (cx - r).max(0)..=(cx + r).min(w - 1);
    let y_range = (cy - r).max(0)..=(cy + r).min(h - 1);
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for y in y_range {
        for x in x_range.clone() {
            out.push(PixelPoint::new(x as f64, y as f64));
        }
    }
    out
}

/// The four grid cells and weights used to interpolate at `p`, with `p`
/// clamped into the map. Indices are flat `y * width + x`.
pub fn bilinear_corners(p: PixelPoint, dims: Dims) -> [(usize, f64); 4] {
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let v = v.clamp(0.0, (n - 1) as f64);
        let i0 = (v.floor() as usize).min(n - 2);
        (i0, i0 + 1, v - i0 as f64)
    };
    let (x0, x1, fx) = axis(p.x, dims.width);
    let (y0, y1, fy) = axis(p.y, dims.height);
    let w = dims.width;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Per-channel bilinear interpolation of `map` at `p`.
pub fn bilinear_sample(map: &FeatureMap, p: PixelPoint) -> Vec<f64> {
    let corners = bilinear_corners(p, map.dims());
    let plane = map.height * map.width;
    (0..map.channels)
        .map(|c| {
            corners
                .iter()
                .map(|&(idx, wgt)| map.values[c * plane + idx] * wgt)
                .sum()
        })
        .collect()
}

/// Differentiable counterpart of [`bilinear_sample`] on a `(1, C, H, W)` or
/// `(C, H, W)` tensor. Returns an `(N, C)` tensor, one row per point.
pub fn sample_tensor(features: &Tensor, points: &[PixelPoint]) -> Result<Tensor> {
    let features = if features.rank() == 4 {
        features.squeeze(0)?
    } else {
        features.clone()
    };
    let (c, h, w) = features.dims3()?;
    let dims = Dims::new(h, w);
    let n = points.len();
    let mut indices = Vec::with_capacity(4 * n);
    let mut weights = Vec::with_capacity(4 * n);
    for p in points {
        for (idx, wgt) in bilinear_corners(*p, dims) {
            indices.push(idx as u32);
            weights.push(wgt);
        }
    }
    let device = features.device();
    let indices = Tensor::from_vec(indices, 4 * n, device)?;
    let weights = Tensor::from_vec(weights, (1, n, 4), device)?.to_dtype(features.dtype())?;
    let gathered = features
        .reshape((c, h * w))?
        .index_select(&indices, 1)?
        .reshape((c, n, 4))?;
    let sampled = gathered.broadcast_mul(&weights)?.sum(2)?;
    Ok(sampled.t()?.contiguous()?)
}

/// Proportional rescale of an image-space point onto a grid of other dims.
pub fn to_feature_coords(p: PixelPoint, image_dims: Dims, feature_dims: Dims) -> PixelPoint {
    PixelPoint::new(
        p.x * feature_dims.width as f64 / image_dims.width as f64,
        p.y * feature_dims.height as f64 / image_dims.height as f64,
    )
}

/// Inverse of [`to_feature_coords`].
pub fn to_image_coords(p: PixelPoint, feature_dims: Dims, image_dims: Dims) -> PixelPoint {
    to_feature_coords(p, feature_dims, image_dims)
}

/// Row-stochastic `(out, in)` matrix that bilinearly resamples one axis,
/// using the same proportional mapping as [`to_feature_coords`].
fn resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for o in 0..output {
        let src = o as f64 * input as f64 / output as f64;
        let corners = bilinear_corners(PixelPoint::new(src, 0.0), Dims::new(1, input));
        for (idx, wgt) in corners.iter().take(2) {
            m[o * input + idx] += wgt;
        }
    }
    m
}

/// Bilinearly resizes a `(1, C, H, W)` feature tensor to `target`. The
/// resize is a pair of matrix products, so it stays differentiable.
pub fn resize_features(features: &Tensor, target: Dims) -> Result<Tensor> {
    let (_, _, h, w) = features.dims4()?;
    if h == target.height && w == target.width {
        return Ok(features.clone());
    }
    let device = features.device();
    let dtype = features.dtype();
    let rh = Tensor::from_vec(resize_matrix(h, target.height), (target.height, h), device)?
        .to_dtype(dtype)?;
    let rw = Tensor::from_vec(resize_matrix(w, target.width), (target.width, w), device)?
        .to_dtype(dtype)?;
    let rows = rh.unsqueeze(0)?.unsqueeze(0)?.broadcast_matmul(features)?;
    Ok(rows.broadcast_matmul(&rw.t()?.unsqueeze(0)?.unsqueeze(0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn affine_map(h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, |_, y, x| 2.0 * x as f64 + 3.0 * y as f64)
    }

    #[test]
    fn unit_direction_examples() {
        let d = unit_direction(PixelPoint::new(0.0, 0.0), PixelPoint::new(3.0, 4.0)).unwrap();
        assert_abs_diff_eq!(d[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.8, epsilon = 1e-12);
        let d = unit_direction(PixelPoint::new(2.0, 2.0), PixelPoint::new(2.0, 5.0)).unwrap();
        assert_eq!(d, [0.0, 1.0]);
        let err = unit_direction(PixelPoint::new(1.0, 1.0), PixelPoint::new(1.0, 1.0));
        assert!(matches!(err, Err(Error::ZeroDistance)));
    }

    #[test]
    fn distance_examples() {
        let p = PixelPoint::new;
        assert_eq!(euclidean_distance(p(0.0, 0.0), p(3.0, 4.0)), 5.0);
        assert_eq!(euclidean_distance(p(7.0, 7.0), p(7.0, 7.0)), 0.0);
        assert_eq!(euclidean_distance(p(1.0, 2.0), p(4.0, 6.0)), 5.0);
    }

    #[test]
    fn patch_examples() {
        let big = Dims::new(100, 100);
        let pts = patch_points(PixelPoint::new(5.0, 5.0), 1, big);
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], PixelPoint::new(4.0, 4.0));
        assert_eq!(pts[8], PixelPoint::new(6.0, 6.0));
        assert_eq!(patch_points(PixelPoint::new(0.0, 0.0), 1, Dims::new(10, 10)).len(), 4);
        assert_eq!(patch_points(PixelPoint::new(5.0, 5.0), 4, big).len(), 81);
        assert_eq!(patch_points(PixelPoint::new(5.0, 5.0), 0, big), vec![PixelPoint::new(5.0, 5.0)]);
    }

    #[test]
    fn bilinear_integer_point_is_direct_index() {
        let map = FeatureMap::from_fn(3, 5, 6, |c, y, x| (c * 100 + y * 10 + x) as f64 * 0.37);
        assert_eq!(bilinear_sample(&map, PixelPoint::new(3.0, 2.0)), map.vector_at(2, 3));
        // last row and column go through the clamped upper cell
        assert_eq!(bilinear_sample(&map, PixelPoint::new(5.0, 4.0)), map.vector_at(4, 5));
    }

    #[test]
    fn bilinear_cell_midpoint() {
        let map = FeatureMap::new(1, 2, 2, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&map, PixelPoint::new(0.5, 0.5)), vec![2.0]);
    }

    #[test]
    fn bilinear_affine_field() {
        let map = affine_map(4, 4);
        let v = bilinear_sample(&map, PixelPoint::new(1.25, 0.5));
        assert_abs_diff_eq!(v[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_clamps_outside() {
        let map = affine_map(4, 4);
        assert_eq!(bilinear_sample(&map, PixelPoint::new(-3.0, -1.0)), vec![0.0]);
        assert_eq!(bilinear_sample(&map, PixelPoint::new(9.0, 9.0)), vec![15.0]);
    }

    #[test]
    fn tensor_sampling_matches_scalar_sampling() {
        let map = FeatureMap::from_fn(2, 5, 7, |c, y, x| ((c + 1) * (3 * y + x)) as f64).clone();
        let t = map.to_tensor().unwrap();
        let pts = [PixelPoint::new(1.3, 2.7), PixelPoint::new(6.0, 0.0), PixelPoint::new(-1.0, 9.0)];
        let sampled = sample_tensor(&t, &pts).unwrap().to_vec2::<f64>().unwrap();
        for (row, p) in sampled.iter().zip(pts) {
            let expected = bilinear_sample(&map, p);
            for (a, b) in row.iter().zip(&expected) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn feature_coords_examples() {
        let img = Dims::new(512, 512);
        let feat = Dims::new(64, 64);
        let p = PixelPoint::new(13.0, 71.5);
        assert_eq!(to_feature_coords(p, img, img), p);
        assert_eq!(to_feature_coords(PixelPoint::new(256.0, 256.0), img, feat), PixelPoint::new(32.0, 32.0));
        assert_eq!(to_feature_coords(PixelPoint::new(8.0, 8.0), img, feat), PixelPoint::new(1.0, 1.0));
        let back = to_image_coords(to_feature_coords(p, img, feat).rounded(), feat, img);
        assert!((back.x - p.x).abs() <= 8.0 && (back.y - p.y).abs() <= 8.0);
    }

    #[test]
    fn resize_is_identity_on_same_dims_and_exact_on_affine() {
        let map = affine_map(4, 4);
        let t = map.to_tensor().unwrap().unsqueeze(0).unwrap();
        let same = resize_features(&t, Dims::new(4, 4)).unwrap();
        assert_eq!(FeatureMap::from_tensor(&same).unwrap(), map);
        let up = FeatureMap::from_tensor(&resize_features(&t, Dims::new(8, 8)).unwrap()).unwrap();
        // output cell (y, x) samples input at (y/2, x/2)
        assert_abs_diff_eq!(up.at(0, 3, 5), 2.0 * 2.5 + 3.0 * 1.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn bilinear_exact_on_grid(seed in 0u64..1000, h in 1usize..7, w in 1usize..7) {
            let map = FeatureMap::from_fn(2, h, w, |c, y, x| {
                let s = (seed as f64 + 1.0) * (c * 31 + y * 7 + x * 3 + 1) as f64;
                (s * 12.9898).sin() * 43758.5453 % 1.0
            });
            for y in 0..h {
                for x in 0..w {
                    let v = bilinear_sample(&map, PixelPoint::new(x as f64, y as f64));
                    prop_assert_eq!(v, map.vector_at(y, x));
                }
            }
        }

        #[test]
        fn bilinear_exact_on_affine(a in -5.0f64..5.0, b in -5.0f64..5.0, c0 in -5.0f64..5.0,
                                    x in 0.0f64..6.0, y in 0.0f64..4.0) {
            let map = FeatureMap::from_fn(1, 5, 7, |_, yy, xx| a * xx as f64 + b * yy as f64 + c0);
            let v = bilinear_sample(&map, PixelPoint::new(x, y))[0];
            prop_assert!((v - (a * x + b * y + c0)).abs() < 1e-5);
        }

        #[test]
        fn patch_reflection_symmetry(cx in 0usize..20, cy in 0usize..15, r in 0usize..6) {
            let dims = Dims::new(15, 20);
            let pts = patch_points(PixelPoint::new(cx as f64, cy as f64), r, dims);
            let refl = PixelPoint::new((19 - cx) as f64, (14 - cy) as f64);
            let mut mirrored: Vec<(i64, i64)> = patch_points(refl, r, dims)
                .into_iter()
                .map(|p| (19 - p.x as i64, 14 - p.y as i64))
                .collect();
            mirrored.sort();
            let mut direct: Vec<(i64, i64)> = pts.iter().map(|p| (p.x as i64, p.y as i64)).collect();
            direct.sort();
            prop_assert_eq!(direct, mirrored);
            if cx >= r && cy >= r && cx + r < 20 && cy + r < 15 {
                prop_assert_eq!(pts.len(), (2 * r + 1).pow(2));
            }
        }

        #[test]
        fn triangle_inequality(ax in -50.0f64..50.0, ay in -50.0f64..50.0, bx in -50.0f64..50.0,
                               by in -50.0f64..50.0, cx in -50.0f64..50.0, cy in -50.0f64..50.0) {
            let (a, b, c) = (PixelPoint::new(ax, ay), PixelPoint::new(bx, by), PixelPoint::new(cx, cy));
            prop_assert!(euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9);
            prop_assert_eq!(euclidean_distance(a, b), euclidean_distance(b, a));
        }

        #[test]
        fn unit_direction_is_unit(hx in -50.0f64..50.0, hy in -50.0f64..50.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
            prop_assume!((hx - tx).abs() + (hy - ty).abs() > 1e-6);
            let d = unit_direction(PixelPoint::new(hx, hy), PixelPoint::new(tx, ty)).unwrap();
            prop_assert!((d[0].hypot(d[1]) - 1.0).abs() < 1e-6);
        }
    }
}
