//! Image/text dual encoders. [`ToyClipEncoder`] is a small deterministic
//! stand-in for a pretrained contrastive model: a two-stage strided
//! convolutional image tower and a hashed bag-of-tokens text tower sharing one
//! embedding space.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::checkpoint::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::geometry::{Dims, PixelPoint};
use crate::synthetic::{shape_image, Shape, COLORS};
use crate::tensor::{self, randn};

pub trait DualEncoder: Send + Sync {
    /// `(1, 3, H, W)` image in `[-1, 1]` to a `(D,)` embedding. Differentiable.
    fn encode_image(&self, image: &Tensor) -> Result<Tensor>;

    fn encode_text(&self, prompt: &str) -> Result<Tensor>;

    fn embedding_dim(&self) -> usize;
}

/// Lower-cased alphanumeric tokens of `prompt`, each hashed into `buckets`.
pub fn token_buckets(prompt: &str, buckets: usize) -> Vec<usize> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|token| {
            let digest = Sha256::digest(token.to_lowercase().as_bytes());
            let mut head = [0u8; 8];
            head.copy_from_slice(&digest[..8]);
            (u64::from_le_bytes(head) % buckets as u64) as usize
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub stage_channels: [usize; 2],
    pub token_buckets: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            stage_channels: [8, 16],
            token_buckets: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyClipEncoder {
    pub config: ToyEncoderConfig,
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
}

struct Params<'a>(&'a BTreeMap<String, Tensor>);

impl Params<'_> {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing encoder tensor {name}")))
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        let y = x.conv2d(w, 1, 2, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?)
    }

    /// Activations after each strided stage.
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let f1 = self.conv("stage1", image)?.silu()?;
        let f2 = self.conv("stage2", &f1)?.silu()?;
        Ok(vec![f1, f2])
    }

    fn image_embedding(&self, image: &Tensor) -> Result<Tensor> {
        let stages = self.stages(image)?;
        let pooled = stages[1].mean(D::Minus1)?.mean(D::Minus1)?;
        let w = self.get("proj.weight")?;
        let b = self.get("proj.bias")?;
        Ok(pooled.matmul(&w.t()?)?.broadcast_add(b)?.squeeze(0)?)
    }

    fn text_embedding(&self, prompt: &str, buckets: usize, dim: usize) -> Result<Tensor> {
        let ids = token_buckets(prompt, buckets);
        if ids.is_empty() {
            return Ok(Tensor::zeros(dim, tensor::DTYPE, &tensor::device())?);
        }
        let idx = Tensor::from_vec(
            ids.iter().map(|&b| b as u32).collect::<Vec<_>>(),
            ids.len(),
            &tensor::device(),
        )?;
        Ok(self.get("token_table")?.index_select(&idx, 0)?.mean(0)?)
    }
}

impl ToyClipEncoder {
    pub fn new(seed: u64, config: ToyEncoderConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc11b);
        let [c1, c2] = config.stage_channels;
        let mut params = BTreeMap::new();
        params.insert("stage1.weight".into(), randn(&mut rng, &[c1, 3, 3, 3], 1.0 / 27f64.sqrt())?);
        params.insert("stage1.bias".into(), randn(&mut rng, &[c1], 0.05)?);
        params.insert(
            "stage2.weight".into(),
            randn(&mut rng, &[c2, c1, 3, 3], 1.0 / ((9 * c1) as f64).sqrt())?,
        );
        params.insert("stage2.bias".into(), randn(&mut rng, &[c2], 0.05)?);
        params.insert(
            "proj.weight".into(),
            randn(&mut rng, &[config.embed_dim, c2], 1.0 / (c2 as f64).sqrt())?,
        );
        params.insert("proj.bias".into(), randn(&mut rng, &[config.embed_dim], 0.05)?);
        params.insert(
            "token_table".into(),
            randn(&mut rng, &[config.token_buckets, config.embed_dim], 1.0)?,
        );
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    /// Activation maps after each stage: index 0 at half resolution, index 1
    /// at quarter resolution.
    pub fn feature_pyramid(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Params(&self.params).stages(image)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("kind".into(), "toy-clip-encoder".into());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        write_archive(path, &self.params, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = read_archive(path)?;
        if meta.get("kind").map(String::as_str) != Some("toy-clip-encoder") {
            return Err(Error::Checkpoint(format!("{} is not an encoder archive", path.display())));
        }
        let config = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let seed = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        Ok(Self {
            config,
            seed,
            params,
        })
    }

    /// Contrastive training on synthetic `(shape image, "a <color> <shape>")`
    /// pairs with a symmetric InfoNCE loss. Returns the per-step loss.
    pub fn train_contrastive(
        &mut self,
        dims: Dims,
        steps: usize,
        learning_rate: f64,
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let mut images = Vec::new();
        let mut captions = Vec::new();
        for shape in Shape::ALL {
            for (name, rgb) in COLORS {
                let center = PixelPoint::new(dims.width as f64 / 2.0, dims.height as f64 / 2.0);
                let radius = dims.width.min(dims.height) as f64 / 4.0;
                let img = shape_image(dims, shape, center, radius, rgb, [0.5; 3]);
                images.push(img.to_tensor()?);
                captions.push(format!("a {name} {}", shape.name()));
            }
        }
        let batch = Tensor::cat(&images, 0)?;
        let n = captions.len();
        let targets = Tensor::arange(0u32, n as u32, &tensor::device())?;

        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(v)?)))
            .collect::<Result<_>>()?;
        let live: BTreeMap<String, Tensor> = vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        let mut opt = AdamW::new(
            vars.values().cloned().collect(),
            ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let p = Params(&live);
        let normalize = |t: Tensor| -> Result<Tensor> {
            let norm = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
            Ok(t.broadcast_div(&norm)?)
        };
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let stages = p.stages(&batch)?;
            let pooled = stages[1].mean(D::Minus1)?.mean(D::Minus1)?;
            let img = pooled
                .matmul(&p.get("proj.weight")?.t()?)?
                .broadcast_add(p.get("proj.bias")?)?;
            let txt = captions
                .iter()
                .map(|c| p.text_embedding(c, self.config.token_buckets, self.config.embed_dim))
                .collect::<Result<Vec<_>>>()?;
            let txt = Tensor::stack(&txt, 0)?;
            let logits = (normalize(img)?.matmul(&normalize(txt)?.t()?)? / temperature)?;
            let loss = ((candle_nn::loss::cross_entropy(&logits, &targets)?
                + candle_nn::loss::cross_entropy(&logits.t()?, &targets)?)?
                / 2.0)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite("contrastive loss".into()));
            }
            trace.push(value);
            opt.backward_step(&loss)?;
        }
        self.params = vars
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_detached_tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(trace)
    }
}

impl DualEncoder for ToyClipEncoder {
    fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        Params(&self.params).image_embedding(image)
    }

    fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        Params(&self.params).text_embedding(prompt, self.config.token_buckets, self.config.embed_dim)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::Image;

    #[test]
    fn token_hashing() {
        assert_eq!(token_buckets("A cat, a CAT!", 1000).len(), 4);
        let ids = token_buckets("cat Cat", 1000);
        assert_eq!(ids[0], ids[1]);
        assert!(token_buckets("  ,, ", 10).is_empty());
    }

    #[test]
    fn deterministic_nonzero_embeddings() {
        let a = ToyClipEncoder::new(1, Default::default()).unwrap();
        let b = ToyClipEncoder::new(1, Default::default()).unwrap();
        let img = Image::filled(Dims::new(16, 16), [0.3, 0.6, 0.1]).to_tensor().unwrap();
        let ea = tensor::to_vec(&a.encode_image(&img).unwrap()).unwrap();
        let eb = tensor::to_vec(&b.encode_image(&img).unwrap()).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ea.len(), 32);
        assert!(tensor::norm(&ea) > 0.0);
        let t = tensor::to_vec(&a.encode_text("a red circle").unwrap()).unwrap();
        assert!(tensor::norm(&t) > 0.0 && t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn contrastive_training_reduces_loss() {
        let mut enc = ToyClipEncoder::new(3, Default::default()).unwrap();
        let trace = enc.train_contrastive(Dims::new(16, 16), 60, 1e-2, 0.1).unwrap();
        let head: f64 = trace[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = trace[trace.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let enc = ToyClipEncoder::new(9, Default::default()).unwrap();
        enc.save(&path).unwrap();
        let back = ToyClipEncoder::load(&path).unwrap();
        let a = tensor::to_vec(&enc.encode_text("blue square").unwrap()).unwrap();
        let b = tensor::to_vec(&back.encode_text("blue square").unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
