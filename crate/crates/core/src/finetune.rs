//! Identity-preserving finetuning: low-rank adapters on the denoiser trained
//! on the single input image with the standard noise-prediction loss
//!
//! ```text
//! L(z, dtheta) = E_{eps, t} || eps - eps_{theta + dtheta}(alpha_t z + sigma_t eps) ||^2
//! ```
//!
//! Base weights never change; only the adapters are optimized.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{self, randn};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Substring patterns over layer names; `"*"` matches every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSelector(pub Vec<String>);

impl LayerSelector {
    pub fn attention() -> Self {
        Self(vec!["attn.".into()])
    }

    pub fn all() -> Self {
        Self(vec!["*".into()])
    }

    pub fn matches(&self, name: &str) -> bool {
        self.0.iter().any(|p| p == "*" || name.contains(p.as_str()))
    }
}

impl Default for LayerSelector {
    fn default() -> Self {
        Self::attention()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub target_layers: LayerSelector,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            learning_rate: 5e-4,
            steps: 80,
            target_layers: LayerSelector::default(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("LoRA learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearLayerInfo {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

/// `y += (x A^T) B^T * alpha / rank`, with `A: (rank, d_in)`, `B: (d_out, rank)`.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    pub down: Tensor,
    pub up: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl AdapterSet {
    /// Low-rank contribution for layer `name`, or `None` when it carries no adapter.
    pub fn delta(&self, name: &str, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(layer) = self.layers.get(name) else {
            return Ok(None);
        };
        let scale = self.alpha / self.rank as f64;
        let hidden = x.matmul(&layer.down.t()?)?;
        Ok(Some((hidden.matmul(&layer.up.t()?)? * scale)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .values()
            .map(|l| l.down.elem_count() + l.up.elem_count())
            .sum()
    }

    /// Copy detached from any autodiff graph.
    pub fn frozen(&self) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|(k, l)| {
                Ok((
                    k.clone(),
                    LoraLayer {
                        down: l.down.detach().copy()?,
                        up: l.up.detach().copy()?,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rank: self.rank,
            alpha: self.alpha,
            layers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (name, layer) in &self.layers {
            tensors.insert(format!("{name}.down"), layer.down.clone());
            tensors.insert(format!("{name}.up"), layer.up.clone());
        }
        let mut meta = std::collections::HashMap::new();
        meta.insert("kind".to_string(), "lora-adapters".to_string());
        meta.insert("rank".to_string(), self.rank.to_string());
        meta.insert("alpha".to_string(), self.alpha.to_string());
        crate::diffusion::checkpoint::write_archive(path, &tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = crate::diffusion::checkpoint::read_archive(path)?;
        if meta.get("kind").map(String::as_str) != Some("lora-adapters") {
            return Err(Error::Checkpoint(format!("{} is not an adapter archive", path.display())));
        }
        let parse = |key: &str| -> Result<f64> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
        };
        let rank = parse("rank")? as usize;
        let alpha = parse("alpha")?;
        let mut layers = BTreeMap::new();
        for (key, down) in &tensors {
            if let Some(name) = key.strip_suffix(".down") {
                let up = tensors
                    .get(&format!("{name}.up"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {name}.up")))?;
                layers.insert(
                    name.to_string(),
                    LoraLayer {
                        down: down.clone(),
                        up: up.clone(),
                    },
                );
            }
        }
        Ok(Self { rank, alpha, layers })
    }
}

/// A denoiser carrying trainable adapters.
pub struct AdaptedModel {
    pub model: Arc<dyn Denoiser>,
    pub adapters: Arc<AdapterSet>,
    pub vars: Vec<Var>,
}

/// Adds a zero-initialized rank-`cfg.rank` path to every linear layer matched
/// by `cfg.target_layers`. The down projection is random, the up projection
/// zero, so the adapted model reproduces the base model exactly.
pub fn inject_adapters(
    model: &dyn Denoiser,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    cfg.validate()?;
    let targets: Vec<_> = model
        .linear_layers()
        .into_iter()
        .filter(|l| cfg.target_layers.matches(&l.name))
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptySelector(cfg.target_layers.0.join(",")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ba_ada9);
    let mut layers = BTreeMap::new();
    let mut vars = Vec::new();
    for layer in targets {
        let down = Var::from_tensor(&randn(
            &mut rng,
            &[cfg.rank, layer.d_in],
            1.0 / (layer.d_in as f64).sqrt(),
        )?)?;
        let up = Var::from_tensor(&Tensor::zeros(
            (layer.d_out, cfg.rank),
            tensor::DTYPE,
            &tensor::device(),
        )?)?;
        layers.insert(
            layer.name,
            LoraLayer {
                down: down.as_tensor().clone(),
                up: up.as_tensor().clone(),
            },
        );
        vars.push(down);
        vars.push(up);
    }
    let adapters = Arc::new(AdapterSet {
        rank: cfg.rank,
        alpha: cfg.rank as f64,
        layers,
    });
    let adapted = model.with_adapters(adapters.clone())?;
    Ok(AdaptedModel {
        model: adapted,
        adapters,
        vars,
    })
}

pub struct FinetuneOutcome {
    pub model: Arc<dyn Denoiser>,
    /// Frozen adapters; `None` when no step was taken.
    pub adapters: Option<Arc<AdapterSet>>,
    pub loss_trace: Vec<f64>,
}

/// Trains adapters on one image. `image` is `(1, 3, H, W)` in `[-1, 1]`.
/// Timesteps are drawn uniformly from `1..=num_steps`, noise from `N(0, I)`,
/// both from a generator seeded with `seed`.
pub fn finetune_identity(
    model: Arc<dyn Denoiser>,
    image: &Tensor,
    prompt: &str,
    cfg: &LoraConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let dims = model.image_dims();
    let (_, _, h, w) = image.dims4()?;
    if (h, w) != (dims.height, dims.width) {
        return Err(Error::ShapeMismatch {
            expected: vec![dims.height, dims.width],
            actual: vec![h, w],
        });
    }
    if cfg.steps == 0 {
        return Ok(FinetuneOutcome {
            model,
            adapters: None,
            loss_trace: Vec::new(),
        });
    }

    let adapted = inject_adapters(model.as_ref(), cfg, seed)?;
    let z = model.encode_image(image)?.detach();
    let cond = model.embed_prompt(prompt)?;
    let mut optimizer = AdamW::new(
        adapted.vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = rng.random_range(1..=schedule.num_steps);
        let noise = randn(&mut rng, z.dims(), 1.0)?;
        let noisy = ((&z * schedule.alpha(t)?)? + (&noise * schedule.sigma(t)?)?)?;
        let predicted = adapted
            .model
            .predict_noise(&noisy, schedule.fraction(t), &cond)?;
        let loss = (noise - predicted)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("finetuning loss at step {step}")));
        }
        loss_trace.push(value);
        optimizer.backward_step(&loss)?;
    }

    let frozen = Arc::new(adapted.adapters.frozen()?);
    Ok(FinetuneOutcome {
        model: model.with_adapters(frozen.clone())?,
        adapters: Some(frozen),
        loss_trace,
    })
}

/// Moving average with the given window, used to judge noisy loss traces.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    trace
        .windows(window.min(trace.len()).max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_toy_backend, ToyConfig};

    #[test]
    fn selector_matching() {
        let s = LayerSelector::attention();
        assert!(s.matches("attn.q"));
        assert!(!s.matches("time_proj"));
        assert!(LayerSelector::all().matches("anything"));
        assert!(!LayerSelector(vec![]).matches("attn.q"));
    }

    #[test]
    fn empty_selector_is_an_error() {
        let (model, _) = make_toy_backend(0, ToyConfig::small(8)).unwrap();
        let cfg = LoraConfig {
            target_layers: LayerSelector(vec!["no_such_layer".into()]),
            ..Default::default()
        };
        assert!(matches!(
            inject_adapters(&model, &cfg, 0),
            Err(Error::EmptySelector(_))
        ));
    }

    #[test]
    fn zero_rank_rejected() {
        let cfg = LoraConfig {
            rank: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert_eq!(smoothed(&[1.0], 5), vec![1.0]);
    }
}
