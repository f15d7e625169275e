//! TOML-backed run configuration. Every key has a default; the README
//! documents the schema.

use std::path::Path;

use d3moe_core::denoiser::{ModelConfig, MoeConfig};
use d3moe_core::diffusion::NoiseSchedule;
use d3moe_core::losses::ScoreMode;
use d3moe_core::moe::{ResamplerConfig, TokenMoeGroupConfig};
use d3moe_core::sampler::{SamplerConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::WorldSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            world: WorldSpec::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            loss: LossSection::default(),
            optimizer: OptimizerSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub expert_hidden: usize,
    pub n_shared: usize,
    pub n_routed: usize,
    pub top_k: usize,
    pub seq_top_k: usize,
    pub resampler_latent_dim: usize,
    pub resampler_layers: usize,
    pub resampler_heads: usize,
    pub noise_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            expert_hidden: 32,
            n_shared: 1,
            n_routed: 8,
            top_k: 2,
            seq_top_k: 2,
            resampler_latent_dim: 16,
            resampler_layers: 2,
            resampler_heads: 2,
            noise_embed_dim: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub sigma_bar_min: f64,
    pub sigma_bar_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        ScheduleSection { sigma_bar_min: s.sigma_bar_min, sigma_bar_max: s.sigma_bar_max }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub score_mode: ScoreMode,
    pub beta_balance: f64,
    pub lambda_t2i: f64,
    pub lambda_mmu: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            alpha: 0.01,
            score_mode: ScoreMode::Exact,
            beta_balance: 0.01,
            lambda_t2i: 1.0,
            lambda_mmu: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub antithetic_time: bool,
    pub two_phase: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 2000, batch_size: 16, eval_every: 500, antithetic_time: false, two_phase: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub strategy: Strategy,
    pub temperature: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { steps: 6, strategy: Strategy::Ancestral, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Samples per held-out prompt for the TV estimate in `evaluate`.
    pub samples_per_prompt: usize,
    /// Cheap in-training eval sample count.
    pub quick_samples: usize,
    /// Batch width the sampler hands the model.
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples_per_prompt: 10_000, quick_samples: 256, chunk: 256 }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss.alpha < 0.0 {
            return Err(Error::Config("loss.alpha must be >= 0".into()));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        if !(self.schedule.sigma_bar_min > 0.0 && self.schedule.sigma_bar_max > self.schedule.sigma_bar_min) {
            return Err(Error::Config("schedule requires 0 < sigma_bar_min < sigma_bar_max".into()));
        }
        self.world.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule { sigma_bar_min: self.schedule.sigma_bar_min, sigma_bar_max: self.schedule.sigma_bar_max }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            strategy: self.sampler.strategy,
            temperature: self.sampler.temperature,
            seed,
        }
    }

    /// Model config derived from the world geometry plus the model section.
    pub fn model_config(&self) -> ModelConfig {
        let w = &self.world;
        let m = &self.model;
        ModelConfig {
            vocab_size: w.vocab_size,
            text_vocab: w.text_vocab_size(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_prompt_len: w.n_attributes,
            target_len: w.target_len(),
            max_answer_len: 2,
            moe: MoeConfig {
                token: TokenMoeGroupConfig {
                    n_shared: m.n_shared,
                    n_routed: m.n_routed,
                    top_k: m.top_k,
                    expert_hidden: m.expert_hidden,
                },
                seq_top_k: m.seq_top_k,
                resampler: ResamplerConfig {
                    input_dim: m.noise_embed_dim,
                    latent_len: w.target_len(),
                    latent_dim: m.resampler_latent_dim,
                    output_dim: m.d_model,
                    layers: m.resampler_layers,
                    heads: m.resampler_heads,
                },
                ..MoeConfig::default()
            },
            seed: self.seed,
        }
    }
}
