//! Run configuration: a strict JSON schema covering the network, objective,
//! schedule, and patch sampling in one document. Every key is required when
//! a file is given; omitting `--config` selects the stock settings.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use a2net_core::net::{NetworkConfig, Variant};
use a2net_core::objective::{LossMode, LossWeights};
use a2net_core::training::TrainingConfig;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub levels: usize,
    pub k_encoder: usize,
    pub k_y: usize,
    pub k_uv: usize,
    pub alpha: f32,
    pub loss_mode: String,
    pub base_lr: f64,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub patch_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "a2net".into(),
            levels: 3,
            k_encoder: 32,
            k_y: 32,
            k_uv: 24,
            alpha: 0.6,
            loss_mode: "mse_ssim".into(),
            base_lr: 2e-4,
            epochs_constant: 100,
            epochs_decay: 100,
            batch_size: 4,
            seed: 0,
            patch_size: 256,
            patch_count: 16,
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file, or returns the defaults when no
    /// path was given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        self.parse_variant()?;
        self.parse_loss_mode()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CliError::Config(format!(
                "alpha must be a non-negative number, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn parse_variant(&self) -> Result<Variant, CliError> {
        Variant::parse(&self.variant).ok_or_else(|| {
            CliError::Config(format!(
                "unknown variant `{}` (expected a2net, a2net32, a2net_rgb, a2net_yuv, or general)",
                self.variant
            ))
        })
    }

    fn parse_loss_mode(&self) -> Result<LossMode, CliError> {
        match self.loss_mode.as_str() {
            "mse" => Ok(LossMode::Mse),
            "ssim" => Ok(LossMode::Ssim),
            "mse_ssim" => Ok(LossMode::MseSsim),
            other => Err(CliError::Config(format!(
                "unknown loss_mode `{other}` (expected mse, ssim, or mse_ssim)"
            ))),
        }
    }

    pub fn network(&self) -> Result<NetworkConfig, CliError> {
        Ok(NetworkConfig {
            variant: self.parse_variant()?,
            levels: self.levels,
            k_encoder: self.k_encoder,
            k_y: self.k_y,
            k_uv: self.k_uv,
            seed: self.seed,
        })
    }

    pub fn training(&self) -> Result<TrainingConfig, CliError> {
        Ok(TrainingConfig {
            base_lr: self.base_lr,
            epochs_constant: self.epochs_constant,
            epochs_decay: self.epochs_decay,
            batch_size: self.batch_size,
            weights: LossWeights { alpha: self.alpha },
            loss_mode: self.parse_loss_mode()?,
            seed: self.seed,
            ..TrainingConfig::default()
        })
    }
}
