//! Experiment configuration: model dimensions, training and generation
//! settings, and the `desk` / `paper` presets they inherit from.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    #[default]
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionConfig {
    pub modality: Modality,
    /// Condition token width.
    pub dim: usize,
    pub resolution: usize,
    pub patch_size: usize,
    /// Learned positional embeddings on image patch tokens.
    pub positional: bool,
    /// Number of learnable prefix queries.
    pub prefix_tokens: usize,
    pub heads: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self { modality: Modality::Class, dim: 64, resolution: 32, patch_size: 8, positional: true, prefix_tokens: 16, heads: 4 }
    }
}

impl ConditionConfig {
    /// Condition tokens per prompt: one per patch plus a global token for
    /// images, a single token for classes.
    pub fn token_count(&self) -> usize {
        match self.modality {
            Modality::Image => (self.resolution / self.patch_size).pow(2) + 1,
            Modality::Class => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub width: usize,
    /// Blocks in each of the encoder and the decoder.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { width: 128, depth: 4, heads: 4, mlp_ratio: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub width: usize,
    /// Residual adaLN blocks.
    pub depth: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { width: 256, depth: 3, time_features: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Width of the reconstruction queries.
    pub dim: usize,
    /// Self-attention blocks after the cross-attention.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { dim: 64, depth: 2, heads: 4, mlp_ratio: 4 }
    }
}

/// Everything that determines parameter shapes. Its hash is stored in
/// checkpoints and verified on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_points: usize,
    pub tokenizer: TokenizerConfig,
    pub condition: ConditionConfig,
    pub mae: MaeConfig,
    pub denoise: DenoiseConfig,
    pub schedule: ScheduleConfig,
    pub recon: ReconConfig,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_points: 256,
            tokenizer: TokenizerConfig { group_size: 4 },
            condition: ConditionConfig::default(),
            mae: MaeConfig::default(),
            denoise: DenoiseConfig::default(),
            schedule: ScheduleConfig::default(),
            recon: ReconConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn token_count(&self) -> usize {
        self.n_points / self.tokenizer.group_size.max(1)
    }

    pub fn token_dim(&self) -> usize {
        self.tokenizer.token_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let n = self.tokenizer.token_count(self.n_points)?;
        if n < 2 {
            return bad(format!("model needs at least 2 tokens, got {n}"));
        }
        let c = &self.condition;
        if c.dim == 0 || c.prefix_tokens == 0 {
            return bad("condition.dim and condition.prefix_tokens must be positive".into());
        }
        if c.modality == Modality::Image && (c.patch_size == 0 || !c.resolution.is_multiple_of(c.patch_size)) {
            return bad(format!("condition.resolution {} is not divisible by patch_size {}", c.resolution, c.patch_size));
        }
        for (name, width, heads) in [
            ("condition", self.mae.width, c.heads),
            ("mae", self.mae.width, self.mae.heads),
            ("recon", self.recon.dim, self.recon.heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return bad(format!("{name}: width {width} is not divisible by {heads} heads"));
            }
        }
        if self.mae.depth == 0 || self.mae.mlp_ratio == 0 || self.recon.mlp_ratio == 0 {
            return bad("mae.depth and mlp ratios must be positive".into());
        }
        if self.denoise.width == 0 || self.denoise.time_features < 2 || !self.denoise.time_features.is_multiple_of(2) {
            return bad("denoise.width must be positive and denoise.time_features even and >= 2".into());
        }
        if self.schedule.steps < 2 {
            return bad(format!("schedule.steps must be at least 2, got {}", self.schedule.steps));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the last step of `epochs`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    pub lr_decay: LrDecay,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub cond_dropout: f64,
    /// Noise draws per masked token in the diffusion loss.
    pub diffusion_batch_mul: usize,
    /// Epochs between checkpoints when a checkpoint path is given; 0 saves
    /// only at the end.
    pub checkpoint_every: usize,
    /// Decay of an exponential moving average of the weights; off when unset.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 0,
            lr_decay: LrDecay::Constant,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
            seed: 0,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            cond_dropout: 0.1,
            diffusion_batch_mul: 4,
            checkpoint_every: 0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.batch_size == 0 || self.diffusion_batch_mul == 0 {
            return bad("train.batch_size and train.diffusion_batch_mul must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio_min)
            || !(0.0..=1.0).contains(&self.mask_ratio_max)
            || self.mask_ratio_min > self.mask_ratio_max
            || self.mask_ratio_min <= 0.0
        {
            return bad("train.mask_ratio_min/max must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("train.cond_dropout must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return bad("train.grad_clip must be positive and train.weight_decay non-negative");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("train.ema_decay must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// MAR iterations.
    pub total_steps: usize,
    /// Reverse diffusion steps per token, evenly respaced over the schedule.
    pub diffusion_steps: usize,
    pub temperature: f64,
    pub cfg_scale: f64,
    /// Sampled tokens (in sampling order) that are blended with the
    /// reconstruction before re-entering the MAE.
    pub fusion_step: usize,
    /// Weight of the sampled token inside the fusion window.
    pub fusion_ratio: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { total_steps: 16, diffusion_steps: 100, temperature: 1.0, cfg_scale: 1.0, fusion_step: 30, fusion_ratio: 0.1, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.total_steps == 0 || self.diffusion_steps == 0 {
            return bad("generation.total_steps and generation.diffusion_steps must be positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("generation.temperature must be non-negative");
        }
        if !(self.cfg_scale >= 1.0 && self.cfg_scale.is_finite()) {
            return bad("generation.cfg_scale must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.fusion_ratio) {
            return bad("generation.fusion_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub f_score_tau: f64,
    /// Largest cloud for which EMD is solved exactly.
    pub emd_exact_max: usize,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub fid_features: usize,
    pub fid_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            f_score_tau: crate::metrics::DEFAULT_TAU,
            emd_exact_max: 512,
            sinkhorn_epsilon: 0.01,
            sinkhorn_iterations: 500,
            fid_features: 32,
            fid_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_recon: TrainConfig,
    pub generation: GenerationConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                dataset: DatasetConfig::default(),
                model: ModelConfig::default(),
                train: TrainConfig {
                    epochs: 1000,
                    batch_size: 2,
                    lr: 2e-3,
                    lr_decay: LrDecay::Cosine,
                    diffusion_batch_mul: 2,
                    ..TrainConfig::default()
                },
                train_recon: TrainConfig { epochs: 3000, lr: 3e-3, cond_dropout: 0.0, ..TrainConfig::default() },
                generation: GenerationConfig { temperature: 0.4, ..GenerationConfig::default() },
                metrics: MetricsConfig::default(),
            },
            Preset::Paper => Self {
                preset,
                dataset: DatasetConfig { n_points: 1024, resolution: 224, ..DatasetConfig::default() },
                model: ModelConfig {
                    n_points: 1024,
                    tokenizer: TokenizerConfig { group_size: 1 },
                    condition: ConditionConfig {
                        dim: 1024,
                        resolution: 224,
                        patch_size: 14,
                        prefix_tokens: 64,
                        heads: 16,
                        ..ConditionConfig::default()
                    },
                    mae: MaeConfig { width: 1024, depth: 16, heads: 16, mlp_ratio: 4 },
                    denoise: DenoiseConfig { width: 1280, depth: 8, time_features: 256 },
                    schedule: ScheduleConfig::default(),
                    recon: ReconConfig { dim: 512, depth: 24, heads: 8, mlp_ratio: 4 },
                    init_seed: 0,
                },
                train: TrainConfig {
                    epochs: 800,
                    batch_size: 256,
                    lr: 1e-4,
                    cond_dropout: 0.1,
                    ..TrainConfig::default()
                },
                train_recon: TrainConfig { epochs: 800, batch_size: 256, lr: 1e-4, cond_dropout: 0.0, ..TrainConfig::default() },
                generation: GenerationConfig { total_steps: 64, ..GenerationConfig::default() },
                metrics: MetricsConfig::default(),
            },
        }
    }

    /// Parses a config document: the fields present override the preset
    /// named by its `preset` key (desk when absent), recursively.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let preset = match value.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("preset serializes");
        merge(&mut merged, value);
        let cfg: Self = serde_path_to_error::deserialize(merged).map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train_recon.validate()?;
        self.generation.validate()?;
        if self.dataset.n_points != self.model.n_points {
            return Err(Error::Config(format!(
                "dataset.n_points {} differs from model.n_points {}",
                self.dataset.n_points, self.model.n_points
            )));
        }
        if self.model.condition.modality == Modality::Image && self.dataset.resolution != self.model.condition.resolution {
            return Err(Error::Config(format!(
                "dataset.resolution {} differs from model.condition.resolution {}",
                self.dataset.resolution, self.model.condition.resolution
            )));
        }
        if self.metrics.f_score_tau <= 0.0 {
            return Err(Error::Config("metrics.f_score_tau must be positive".into()));
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_are_consistent() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.token_count(), 64);
        assert_eq!(cfg.model.token_dim(), 12);
        assert_eq!((cfg.generation.fusion_step, cfg.generation.fusion_ratio), (30, 0.1));
    }

    #[test]
    fn paper_preset_pins_the_published_training_settings() {
        let cfg = ExperimentConfig::preset(Preset::Paper);
        cfg.validate().unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size, cfg.train.lr), (800, 256, 1e-4));
        assert_eq!((cfg.model.mae.depth, cfg.model.mae.width), (16, 1024));
        assert_eq!((cfg.model.denoise.depth, cfg.model.denoise.width), (8, 1280));
        assert_eq!((cfg.model.condition.prefix_tokens, cfg.model.recon.depth), (64, 24));
    }

    #[test]
    fn overrides_merge_into_the_named_preset() {
        let cfg = ExperimentConfig::from_json(r#"{"preset": "paper", "train": {"epochs": 3}, "model": {"mae": {"depth": 2}}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.model.mae.depth, 2);
        assert_eq!(cfg.model.mae.width, 1024);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"dataset": {"families": ["blob"]}}"#).unwrap_err();
        assert!(err.to_string().contains("blob"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"model": {"tokenizer": {"group_size": 3}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"generation": {"cfg_scale": 0.5}}"#).is_err());
    }

    #[test]
    fn hash_tracks_shape_relevant_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.tokenizer.group_size = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
