//! Small deterministic convolutional denoiser for desk-scale runs.
//!
//! Pixel-space: the latent is the image itself in `[-1, 1]`, so encoding and
//! decoding are identities. The network is a three-level U-Net:
//!
//! ```text
//! full   conv_in -> down0 ----------------------------(+)-> up0 -> dec_out -> conv_out
//! 1/2            avgpool -> down1 ------------(+)-> up1 ---^
//! 1/4                       avgpool -> down2 -> attn ---^
//! ```
//!
//! Features are the activations of `dec_out`, at full latent resolution.
//! Linear layers (`time_proj`, `cond_proj`, `attn.{q,k,v,o}`) accept
//! low-rank adapters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_archive, write_archive};
use super::{Denoiser, DenoiserOutput, LatentShape, NoiseSchedule};
use crate::encoder::token_buckets;
use crate::error::{Error, Result};
use crate::finetune::{AdapterSet, LinearLayerInfo};
use crate::geometry::Dims;
use crate::tensor::{self, randn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub prompt_buckets: usize,
    /// Scale of the output convolution at initialization.
    pub output_gain: f64,
    pub num_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_channels: 8,
            height: 64,
            width: 64,
            time_dim: 16,
            cond_dim: 32,
            prompt_buckets: 64,
            output_gain: 0.3,
            num_steps: 50,
        }
    }
}

impl ToyConfig {
    /// Square `size x size` backend with narrow layers, for tests.
    pub fn small(size: usize) -> Self {
        Self {
            base_channels: 4,
            height: size,
            width: size,
            ..Self::default()
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "toy backend needs dims divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.base_channels == 0 || self.latent_channels == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("toy backend channel sizes invalid".into()));
        }
        Ok(())
    }

    /// `(name, d_in, d_out)` of every linear layer.
    pub fn linear_layout(&self) -> Vec<LinearLayerInfo> {
        let c = self.base_channels;
        let mut layers = vec![
            LinearLayerInfo {
                name: "time_proj".into(),
                d_in: self.time_dim,
                d_out: c,
            },
            LinearLayerInfo {
                name: "cond_proj".into(),
                d_in: self.cond_dim,
                d_out: 2 * c,
            },
        ];
        for p in ["q", "k", "v", "o"] {
            layers.push(LinearLayerInfo {
                name: format!("attn.{p}"),
                d_in: 2 * c,
                d_out: 2 * c,
            });
        }
        layers
    }

    /// `(name, c_out, c_in)` of every 3x3 convolution.
    fn conv_layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (l, c) = (self.latent_channels, self.base_channels);
        vec![
            ("conv_in", c, l),
            ("down0", c, c),
            ("down1", 2 * c, c),
            ("down2", 2 * c, 2 * c),
            ("up1", 2 * c, 2 * c),
            ("up0", c, 2 * c),
            ("dec_out", c, c),
            ("conv_out", l, c),
        ]
    }
}

/// Immutable base weights shared by every adapted copy of the model.
#[derive(Debug)]
pub struct ToyWeights {
    pub config: ToyConfig,
    pub seed: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ToyWeights {
    pub fn init(seed: u64, config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, c_out, c_in) in config.conv_layout() {
            let gain = if name == "conv_out" { config.output_gain } else { 1.0 };
            let std = gain / ((9 * c_in) as f64).sqrt();
            tensors.insert(format!("{name}.weight"), randn(&mut rng, &[c_out, c_in, 3, 3], std)?);
            tensors.insert(format!("{name}.bias"), randn(&mut rng, &[c_out], 0.05 * gain)?);
        }
        for layer in config.linear_layout() {
            let std = 1.0 / (layer.d_in as f64).sqrt();
            tensors.insert(
                format!("{}.weight", layer.name),
                randn(&mut rng, &[layer.d_out, layer.d_in], std)?,
            );
            tensors.insert(format!("{}.bias", layer.name), randn(&mut rng, &[layer.d_out], 0.05)?);
        }
        tensors.insert(
            "prompt_table".into(),
            randn(&mut rng, &[config.prompt_buckets, config.cond_dim], 1.0)?,
        );
        Ok(Self {
            config,
            seed,
            tensors,
        })
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Order-independent digest of all base tensors.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for v in tensor::to_vec(t)? {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let schedule = NoiseSchedule::cosine(self.config.num_steps)?;
        let mut meta = HashMap::new();
        meta.insert("kind".into(), "toy-denoiser".into());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("schedule".into(), serde_json::to_string(&schedule)?);
        write_archive(path, &self.tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_archive(path)?;
        if meta.get("kind").map(String::as_str) != Some("toy-denoiser") {
            return Err(Error::Checkpoint(format!(
                "{} is not a toy denoiser archive",
                path.display()
            )));
        }
        let config: ToyConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let seed = meta
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing seed".into()))?;
        config.validate()?;
        Ok(Self {
            config,
            seed,
            tensors,
        })
    }
}

#[derive(Clone)]
pub struct ToyDenoiser {
    weights: Arc<ToyWeights>,
    adapters: Option<Arc<AdapterSet>>,
}

/// Builds the toy denoiser from `seed` together with its cosine schedule.
pub fn make_toy_backend(seed: u64, config: ToyConfig) -> Result<(ToyDenoiser, NoiseSchedule)> {
    let schedule = NoiseSchedule::cosine(config.num_steps)?;
    let model = ToyDenoiser::new(Arc::new(ToyWeights::init(seed, config)?));
    Ok((model, schedule))
}

impl ToyDenoiser {
    pub fn new(weights: Arc<ToyWeights>) -> Self {
        Self {
            weights,
            adapters: None,
        }
    }

    pub fn weights(&self) -> &Arc<ToyWeights> {
        &self.weights
    }

    pub fn adapters(&self) -> Option<&Arc<AdapterSet>> {
        self.adapters.as_ref()
    }

    pub fn config(&self) -> &ToyConfig {
        &self.weights.config
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.weights.get(&format!("{name}.weight"))?;
        let b = self.weights.get(&format!("{name}.bias"))?;
        let y = x.conv2d(w, 1, 1, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?)
    }

    /// `x: (N, d_in) -> (N, d_out)`, plus the adapter path when present.
    fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.weights.get(&format!("{name}.weight"))?;
        let b = self.weights.get(&format!("{name}.bias"))?;
        let y = x.matmul(&w.t()?)?.broadcast_add(b)?;
        match &self.adapters {
            Some(adapters) => match adapters.delta(name, x)? {
                Some(delta) => Ok((y + delta)?),
                None => Ok(y),
            },
            None => Ok(y),
        }
    }

    fn time_embedding(&self, t: f64) -> Result<Tensor> {
        let half = self.config().time_dim / 2;
        let mut values = Vec::with_capacity(2 * half);
        // t in [0, 1] is stretched onto the usual 1000-step training range
        let pos = t * 1000.0;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((pos * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((pos * freq).cos());
        }
        tensor::from_vec(values, &[1, 2 * half])
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let tokens = x.reshape((c, h * w))?.t()?.contiguous()?;
        let q = self.linear("attn.q", &tokens)?;
        let k = self.linear("attn.k", &tokens)?;
        let v = self.linear("attn.v", &tokens)?;
        let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = self.linear("attn.o", &weights.matmul(&v)?)?;
        let out = out.t()?.contiguous()?.reshape((1, c, h, w))?;
        Ok((x + out)?)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let shape = self.latent_shape();
        let (n, c, h, w) = shape.batched();
        if z.dims() != [n, c, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, h, w],
                actual: z.dims().to_vec(),
            });
        }
        Ok(())
    }
}

impl Denoiser for ToyDenoiser {
    fn forward(&self, z: &Tensor, t: f64, conditioning: &Tensor) -> Result<DenoiserOutput> {
        self.check_latent(z)?;
        let cfg = self.config();
        let (h, w) = (cfg.height, cfg.width);
        let c = cfg.base_channels;

        let temb = self.linear("time_proj", &self.time_embedding(t)?)?.silu()?;
        let cemb = self.linear("cond_proj", &conditioning.reshape((1, cfg.cond_dim))?)?;

        let h0 = self
            .conv("conv_in", z)?
            .broadcast_add(&temb.reshape((1, c, 1, 1))?)?;
        let h0 = (&h0 + self.conv("down0", &h0.silu()?)?)?;
        let h1 = self.conv("down1", &h0.avg_pool2d(2)?.silu()?)?;
        let h2 = self
            .conv("down2", &h1.avg_pool2d(2)?.silu()?)?
            .broadcast_add(&cemb.reshape((1, 2 * c, 1, 1))?)?;
        let h2 = self.attention(&h2)?;

        let u1 = (h2.upsample_nearest2d(h / 2, w / 2)? + &h1)?.silu()?;
        let u1 = self.conv("up1", &u1)?;
        let u0 = (self.conv("up0", &u1.upsample_nearest2d(h, w)?.silu()?)? + &h0)?;
        let features = self.conv("dec_out", &u0.silu()?)?.silu()?;
        let noise = self.conv("conv_out", &features)?;
        Ok(DenoiserOutput { noise, features })
    }

    fn latent_shape(&self) -> LatentShape {
        let cfg = self.config();
        LatentShape {
            channels: cfg.latent_channels,
            dims: Dims::new(cfg.height, cfg.width),
        }
    }

    fn image_dims(&self) -> Dims {
        self.latent_shape().dims
    }

    /// Mean of hashed token rows of the prompt table; empty prompts embed to zero.
    fn embed_prompt(&self, prompt: &str) -> Result<Tensor> {
        let cfg = self.config();
        let buckets = token_buckets(prompt, cfg.prompt_buckets);
        if buckets.is_empty() {
            return Ok(Tensor::zeros(cfg.cond_dim, tensor::DTYPE, &tensor::device())?);
        }
        let idx = Tensor::from_vec(
            buckets.iter().map(|&b| b as u32).collect::<Vec<_>>(),
            buckets.len(),
            &tensor::device(),
        )?;
        Ok(self
            .weights
            .get("prompt_table")?
            .index_select(&idx, 0)?
            .mean(0)?)
    }

    fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.check_latent(image)?;
        Ok(image.clone())
    }

    fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }

    fn noise_schedule(&self, num_steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(num_steps)
    }

    fn linear_layers(&self) -> Vec<LinearLayerInfo> {
        self.config().linear_layout()
    }

    fn with_adapters(&self, adapters: Arc<AdapterSet>) -> Result<Arc<dyn Denoiser>> {
        let known = self.config().linear_layout();
        for name in adapters.layers.keys() {
            if !known.iter().any(|l| &l.name == name) {
                return Err(Error::Checkpoint(format!("adapter for unknown layer {name}")));
            }
        }
        Ok(Arc::new(Self {
            weights: self.weights.clone(),
            adapters: Some(adapters),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(cfg: &ToyConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randn(&mut rng, &[1, cfg.latent_channels, cfg.height, cfg.width], 0.5).unwrap()
    }

    #[test]
    fn same_seed_same_outputs() {
        let cfg = ToyConfig::small(16);
        let (a, _) = make_toy_backend(42, cfg.clone()).unwrap();
        let (b, _) = make_toy_backend(42, cfg.clone()).unwrap();
        let z = latent(&cfg, 1);
        let cond = a.embed_prompt("a red ball").unwrap();
        let ea = tensor::to_vec(&a.predict_noise(&z, 0.3, &cond).unwrap()).unwrap();
        let eb = tensor::to_vec(&b.predict_noise(&z, 0.3, &cond).unwrap()).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(a.weights.checksum().unwrap(), b.weights.checksum().unwrap());
        let (c, _) = make_toy_backend(43, cfg).unwrap();
        assert_ne!(a.weights.checksum().unwrap(), c.weights.checksum().unwrap());
    }

    #[test]
    fn feature_shape_contract() {
        // features: base_channels x latent height x latent width
        let cfg = ToyConfig::small(16).with_size(12, 20);
        let (m, schedule) = make_toy_backend(0, cfg.clone()).unwrap();
        schedule.validate().unwrap();
        let z = latent(&cfg, 2);
        let out = m.forward(&z, 0.5, &m.embed_prompt("x").unwrap()).unwrap();
        assert_eq!(out.features.dims(), &[1, cfg.base_channels, 12, 20]);
        assert_eq!(out.noise.dims(), z.dims());
    }

    #[test]
    fn rejects_wrong_latent_shape() {
        let (m, _) = make_toy_backend(0, ToyConfig::small(8)).unwrap();
        let z = Tensor::zeros((1, 3, 4, 4), tensor::DTYPE, &tensor::device()).unwrap();
        assert!(m.forward(&z, 0.1, &m.embed_prompt("").unwrap()).is_err());
        assert!(make_toy_backend(0, ToyConfig::small(10)).is_err());
    }

    #[test]
    fn prompt_embedding_is_deterministic() {
        let (m, _) = make_toy_backend(0, ToyConfig::small(8)).unwrap();
        let a = tensor::to_vec(&m.embed_prompt("A red ball").unwrap()).unwrap();
        let b = tensor::to_vec(&m.embed_prompt("a  red, ball").unwrap()).unwrap();
        assert_eq!(a, b);
        let e = tensor::to_vec(&m.embed_prompt("").unwrap()).unwrap();
        assert!(e.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.safetensors");
        let w = ToyWeights::init(5, ToyConfig::small(8)).unwrap();
        w.save(&path).unwrap();
        let back = ToyWeights::load(&path).unwrap();
        assert_eq!(back.config, w.config);
        assert_eq!(back.seed, 5);
        assert_eq!(back.checksum().unwrap(), w.checksum().unwrap());
    }
}
