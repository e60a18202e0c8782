//! Run configuration.
//!
//! A config file is a flat JSON object whose keys are exactly the field names
//! of [`RunConfig`]. Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;

/// Level centers of the mock quality scorer on the total-variation statistic,
/// ordered bad → excellent.
pub const DEFAULT_QUALITY_CENTERS: [f64; 5] = [0.50, 0.35, 0.22, 0.12, 0.04];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of denoising steps in the sampling chain.
    #[serde(rename = "T")]
    pub t_steps: usize,
    /// Gradient-enabled steps per chain during fine-tuning.
    pub grad_steps: usize,
    pub guidance_scale: f64,
    pub lambda_q: f64,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub adapter_rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub latent_shape: usize,
    pub image_resolution: usize,

    pub num_classes: usize,
    /// Bias strength of the world the base generator is pre-trained on.
    pub rho_train: f64,
    pub steps_per_epoch: usize,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub encoder_width: usize,
    pub generator_steps: usize,
    pub generator_pretrain_lr: f64,
    pub generator_hidden: usize,
    pub weight_decay: f64,
    /// LoRA scale numerator; `None` means alpha = rank.
    pub lora_alpha: Option<f64>,
    /// Discriminator hidden width; `None` means 4 × feature_dim.
    pub disc_hidden: Option<usize>,
    /// Discriminator updates per generator update.
    pub disc_steps_per_generator_step: usize,
    /// Use −log D(f_im) for the generator's adversarial term.
    pub nonsaturating: bool,
    /// Enable gradients on the last `grad_steps` denoising steps instead of a random subset.
    pub fixed_suffix_mask: bool,
    pub quality_centers: [f64; 5],
    pub quality_beta: f64,
    pub probe_l2: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_steps: 10,
            grad_steps: 5,
            guidance_scale: 2.0,
            lambda_q: 0.1,
            generator_lr: 2e-5,
            discriminator_lr: 1e-5,
            adapter_rank: 4,
            epochs: 3,
            batch_size: 4,
            feature_dim: 32,
            latent_shape: 16,
            image_resolution: 16,
            num_classes: 10,
            rho_train: 0.9,
            steps_per_epoch: 1000,
            encoder_steps: 600,
            encoder_lr: 1e-3,
            encoder_width: 128,
            generator_steps: 2000,
            generator_pretrain_lr: 1e-3,
            generator_hidden: 128,
            weight_decay: 0.01,
            lora_alpha: None,
            disc_hidden: None,
            disc_steps_per_generator_step: 1,
            nonsaturating: false,
            fixed_suffix_mask: false,
            quality_centers: DEFAULT_QUALITY_CENTERS,
            quality_beta: 200.0,
            probe_l2: 1.0,
        }
    }
}

fn constraint(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Constraint {
        key,
        message: message.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.t_steps < 1 {
            return Err(constraint("T", "T must be at least 1"));
        }
        if self.grad_steps < 1 || self.grad_steps > self.t_steps {
            return Err(constraint(
                "grad_steps",
                format!("grad_steps must satisfy 1 <= k <= T (k = {}, T = {})", self.grad_steps, self.t_steps),
            ));
        }
        for (key, lr) in [
            ("generator_lr", self.generator_lr),
            ("discriminator_lr", self.discriminator_lr),
            ("encoder_lr", self.encoder_lr),
            ("generator_pretrain_lr", self.generator_pretrain_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(constraint(key, format!("{key} must be > 0")));
            }
        }
        if !(self.lambda_q >= 0.0 && self.lambda_q.is_finite()) {
            return Err(constraint("lambda_q", "lambda_q must be >= 0"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(constraint("guidance_scale", "guidance_scale must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.rho_train) {
            return Err(constraint("rho_train", "rho_train must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(constraint("weight_decay", "weight_decay must be >= 0"));
        }
        let positive = [
            ("adapter_rank", self.adapter_rank),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("feature_dim", self.feature_dim),
            ("latent_shape", self.latent_shape),
            ("steps_per_epoch", self.steps_per_epoch),
            ("encoder_steps", self.encoder_steps),
            ("encoder_width", self.encoder_width),
            ("generator_steps", self.generator_steps),
            ("generator_hidden", self.generator_hidden),
            ("disc_steps_per_generator_step", self.disc_steps_per_generator_step),
        ];
        for (key, v) in positive {
            if v < 1 {
                return Err(constraint(key, format!("{key} must be >= 1")));
            }
        }
        if self.image_resolution < 8 {
            return Err(constraint("image_resolution", "image_resolution must be >= 8"));
        }
        if self.num_classes < 2 || self.num_classes > crate::worldgen::MAX_CLASSES {
            return Err(constraint(
                "num_classes",
                format!("num_classes must lie in 2..={}", crate::worldgen::MAX_CLASSES),
            ));
        }
        if self.disc_hidden == Some(0) {
            return Err(constraint("disc_hidden", "disc_hidden must be >= 1"));
        }
        if let Some(a) = self.lora_alpha {
            if !(a > 0.0) {
                return Err(constraint("lora_alpha", "lora_alpha must be > 0"));
            }
        }
        if !(self.quality_beta > 0.0) {
            return Err(constraint("quality_beta", "quality_beta must be > 0"));
        }
        if !(self.probe_l2 >= 0.0) {
            return Err(constraint("probe_l2", "probe_l2 must be >= 0"));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.adapter_rank as f64) / self.adapter_rank as f64
    }

    pub fn disc_hidden_width(&self) -> usize {
        self.disc_hidden.unwrap_or(4 * self.feature_dim)
    }

    /// Total generator steps of a fine-tuning run.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_json_str(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    std::fs::write(path, cfg.to_json_string()).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}
