//! Run configuration: presets, JSON loading, and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::diffusion::{SamplerConfig, TrainNoiseConfig};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::oracle::VOCAB_SIZE;
use crate::tokenizer::ShapeConfig;
use crate::{Error, Result};

/// Element type the training/sampling pipeline runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Architecture fields of [`ModelConfig`] minus the shape block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: f64,
    pub context_dim: usize,
    pub vocab_size: usize,
    pub sigma_data: f64,
    pub fourier_freqs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLoopConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Dtype,
    /// Where training artifacts (checkpoints, loss curves, reports) go.
    pub out_dir: String,
    /// Where the generated dataset lives.
    pub data_dir: String,
    pub shape: ShapeConfig,
    pub arch: ArchConfig,
    pub sampler: SamplerConfig,
    pub train_noise: TrainNoiseConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainLoopConfig,
    pub dataset: DatasetConfig,
}

impl RunConfig {
    /// Built-in presets: `paper-shape` (shape checks only; the channel count
    /// is not content-codable), `toy` (CPU-trainable), and `micro`
    /// (gradient checks and overfit tests).
    pub fn preset(name: &str) -> Result<RunConfig> {
        let base = RunConfig {
            seed: 0,
            dtype: Dtype::F32,
            out_dir: "runs/out".into(),
            data_dir: "runs/data".into(),
            shape: ShapeConfig {
                frames: 9,
                height: 32,
                width: 32,
                temporal: 2,
                spatial: 2,
                channels: 12,
            },
            arch: ArchConfig {
                d_model: 128,
                n_heads: 4,
                n_blocks: 4,
                mlp_ratio: 4.0,
                context_dim: 16,
                vocab_size: VOCAB_SIZE,
                sigma_data: 0.5,
                fourier_freqs: 64,
            },
            sampler: SamplerConfig::default(),
            train_noise: TrainNoiseConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainLoopConfig {
                steps: 20_000,
                batch_size: 1,
                checkpoint_interval: 2_000,
                log_interval: 50,
            },
            dataset: DatasetConfig {
                n_scenes: 72,
                val_fraction: 1.0 / 9.0,
                ..DatasetConfig::default()
            },
        };
        match name {
            "toy" => Ok(base),
            "paper-shape" => Ok(RunConfig {
                shape: ShapeConfig {
                    frames: 49,
                    height: 352,
                    width: 640,
                    temporal: 8,
                    spatial: 8,
                    channels: 16,
                },
                ..base
            }),
            "micro" => Ok(RunConfig {
                shape: ShapeConfig {
                    frames: 3,
                    height: 8,
                    width: 8,
                    temporal: 2,
                    spatial: 2,
                    channels: 12,
                },
                arch: ArchConfig {
                    d_model: 16,
                    n_heads: 1,
                    n_blocks: 1,
                    mlp_ratio: 4.0,
                    context_dim: 8,
                    vocab_size: VOCAB_SIZE,
                    sigma_data: 0.5,
                    fourier_freqs: 64,
                },
                optimizer: OptimizerConfig { lr: 3e-3, ..OptimizerConfig::default() },
                train: TrainLoopConfig {
                    steps: 2_000,
                    batch_size: 4,
                    checkpoint_interval: 1_000,
                    log_interval: 100,
                },
                dataset: DatasetConfig {
                    n_scenes: 5,
                    val_fraction: 0.2,
                    ..DatasetConfig::default()
                },
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (have: paper-shape, toy, micro)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Apply `key.path=value` overrides. Values parse as JSON scalars first,
    /// falling back to strings; the key path must already exist.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self)?;
        for kv in overrides {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{kv}' must look like key.path=value"))
            })?;
            let parsed: serde_json::Value = serde_json::from_str(value)
                .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            let pointer = format!("/{}", key.replace('.', "/"));
            let slot = tree
                .pointer_mut(&pointer)
                .ok_or_else(|| Error::Config(format!("unknown config field '{key}'")))?;
            *slot = parsed;
        }
        *self = serde_json::from_value(tree)?;
        Ok(())
    }

    /// The full model configuration (architecture plus shape).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.arch.d_model,
            n_heads: self.arch.n_heads,
            n_blocks: self.arch.n_blocks,
            mlp_ratio: self.arch.mlp_ratio,
            context_dim: self.arch.context_dim,
            vocab_size: self.arch.vocab_size,
            sigma_data: self.arch.sigma_data,
            fourier_freqs: self.arch.fourier_freqs,
            shape: self.shape,
        }
    }

    /// Cross-field consistency; called on load by every subcommand.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sampler.validate()?;
        self.train_noise.validate()?;
        self.optimizer.validate()?;
        self.dataset.validate()?;
        if self.arch.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the {} descriptor/reserved ids",
                self.arch.vocab_size, VOCAB_SIZE
            )));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}
