#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clipdrag::image_io::{Image, Mask};
use clipdrag::pipeline::JobSpec;
use clipdrag::synthetic::blob_scene;
use clipdrag::tracking::TrackingStrategy;
use clipdrag::{Dims, PixelPoint};


pub const SIZE: usize = 16;

pub fn scene() -> Image {
    blob_scene(Dims::new(SIZE, SIZE), PixelPoint::new(5.0, 8.0), 2.0, [0.9, 0.1, 0.1], 1)
}

/// Left half editable.
pub fn left_mask() -> Mask {
    Mask {
        height: SIZE,
        width: SIZE,
        editable: (0..SIZE * SIZE).map(|i| i % SIZE < SIZE / 2).collect(),
    }
}

/// A short drag that converges within a few dozen iterations.
pub fn quick_job(image: impl Into<PathBuf>) -> JobSpec {
    let mut job = JobSpec::new(image, "a red circle", "a red circle", vec![[5.0, 8.0, 9.0, 8.0]]);
    job.hyperparams.latent_lr = 0.2;
    job.hyperparams.max_iterations = 40;
    job.hyperparams.lora.steps = 4;
    job.hyperparams.preview_stride = 2;
    job
}

/// A drag that never converges: the step size is too small to move content
/// and plain tracking keeps the handle on it.
pub fn endless_job(image: impl Into<PathBuf>) -> JobSpec {
    let mut job = JobSpec::new(image, "a red circle", "", vec![[3.0, 3.0, 12.0, 12.0]]);
    job.hyperparams.skip_finetune = true;
    job.hyperparams.max_iterations = 1_000_000;
    job.hyperparams.latent_lr = 1e-12;
    job.hyperparams.tracking = TrackingStrategy::Pt;
    job.hyperparams.preview_stride = 0;
    job
}

/// Writes `scene.png` and `<name>.toml` into `dir`; returns the job path.
pub fn write_job(dir: &Path, name: &str, job: &JobSpec) -> PathBuf {
    scene().save_png(&dir.join("scene.png")).unwrap();
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, job.to_toml().unwrap()).unwrap();
    path
}
