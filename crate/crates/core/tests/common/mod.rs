#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clipdrag::diffusion::toy::{ToyDenoiser, ToyWeights};
use clipdrag::diffusion::{Denoiser, ToyConfig};
use clipdrag::encoder::{ToyClipEncoder, ToyEncoderConfig};
use clipdrag::pipeline::{JobInputs, JobSpec};
use clipdrag::synthetic::blob_scene;
use clipdrag::{Dims, PixelPoint};

/// Step size at which one motion-supervision update moves toy content by
/// roughly one cell.
pub const TOY_LATENT_LR: f64 = 0.2;

/// A one-pair drag of a small red blob on a `size x size` textured scene.
#[derive(Debug, Clone, Copy)]
pub struct ToyDrag {
    pub size: usize,
    pub center: [f64; 2],
    pub radius: f64,
    pub target: [f64; 2],
    pub scene_seed: u64,
    pub model_seed: u64,
}

impl Default for ToyDrag {
    fn default() -> Self {
        Self {
            size: 32,
            center: [10.0, 16.0],
            radius: 2.5,
            target: [16.0, 16.0],
            scene_seed: 1,
            model_seed: 0,
        }
    }
}

impl ToyDrag {
    pub fn spec(&self, image: impl Into<PathBuf>) -> JobSpec {
        let [hx, hy] = self.center;
        let [tx, ty] = self.target;
        let mut job = JobSpec::new(image, "a red circle", "a red circle", vec![[hx, hy, tx, ty]]);
        job.hyperparams.latent_lr = TOY_LATENT_LR;
        job.hyperparams.max_iterations = 500;
        job.backend.seed = self.model_seed;
        job
    }

    pub fn inputs(&self) -> JobInputs {
        let dims = Dims::new(self.size, self.size);
        let center = PixelPoint::new(self.center[0], self.center[1]);
        JobInputs {
            image: blob_scene(dims, center, self.radius, [0.9, 0.1, 0.1], self.scene_seed),
            mask: None,
        }
    }

    pub fn model(&self) -> Arc<dyn Denoiser> {
        let config = ToyConfig::default().with_size(self.size, self.size);
        Arc::new(ToyDenoiser::new(Arc::new(
            ToyWeights::init(self.model_seed, config).expect("toy weights"),
        )))
    }

    /// Writes `<name>.png` and `<name>.toml` into `dir` and returns the job
    /// file path.
    pub fn write(&self, dir: &Path, name: &str) -> PathBuf {
        let image = format!("{name}.png");
        self.inputs().image.save_png(&dir.join(&image)).expect("write png");
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, self.spec(image).to_toml().expect("toml")).expect("write job");
        path
    }
}

pub fn encoder() -> ToyClipEncoder {
    ToyClipEncoder::new(0, ToyEncoderConfig::default()).expect("encoder")
}
