//! Procedural images for toy jobs and encoder training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Dims, PixelPoint};
use crate::image_io::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Circle, Shape::Square];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 3] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.2, 0.9]),
];

/// Soft-edged shape of `radius` pixels over a flat background.
pub fn shape_image(
    dims: Dims,
    shape: Shape,
    center: PixelPoint,
    radius: f64,
    fg: [f64; 3],
    bg: [f64; 3],
) -> Image {
    let mut img = Image::filled(dims, bg);
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (dx, dy) = (x as f64 - center.x, y as f64 - center.y);
            let d = match shape {
                Shape::Circle => dx.hypot(dy),
                Shape::Square => dx.abs().max(dy.abs()),
            };
            // one-pixel linear ramp at the border
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            for c in 0..3 {
                img.set(c, y, x, bg[c] + cover * (fg[c] - bg[c]));
            }
        }
    }
    img
}

/// Smooth low-contrast background pattern, so that every location carries
/// slightly different content.
pub fn textured_background(dims: Dims, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, usize)> = (0..6)
        .map(|i| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..std::f64::consts::TAU),
                i % 3,
            )
        })
        .collect();
    let mut img = Image::filled(dims, [0.45, 0.45, 0.45]);
    for y in 0..dims.height {
        for x in 0..dims.width {
            for &(fx, fy, phase, c) in &waves {
                let v = img.get(c, y, x) + 0.08 * (fx * x as f64 + fy * y as f64 + phase).sin();
                img.set(c, y, x, v);
            }
        }
    }
    img
}

/// A colored disk over a textured background: the standard toy drag scene.
pub fn blob_scene(dims: Dims, center: PixelPoint, radius: f64, color: [f64; 3], seed: u64) -> Image {
    let bg = textured_background(dims, seed);
    let disk = shape_image(dims, Shape::Circle, center, radius, [1.0; 3], [0.0; 3]);
    let mut img = bg.clone();
    for y in 0..dims.height {
        for x in 0..dims.width {
            let cover = disk.get(0, y, x);
            for (c, &fg) in color.iter().enumerate() {
                img.set(c, y, x, bg.get(c, y, x) * (1.0 - cover) + fg * cover);
            }
        }
    }
    img
}
