//! Image tokenizer: CNN encoder, frozen-codebook quantization, decoder with
//! global-token cross-attention, the VQ objective and its training loop.

mod global;
pub mod io;
mod model;
mod synth;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::CodebookError;
use crate::numerics::{AdamConfig, NumericsError};
use crate::quantizer::QuantizeError;

pub use global::{FeatureFile, GlobalFeatures, ToyExtractor};
pub use model::{ForwardMode, LossTerms, ParamStore, TokenizerModel, VqForward};
pub use synth::{synthetic_image, synthetic_images};
pub use train::{StepLog, Trainer};

/// Spatial reduction of the encoder.
pub const DOWNSAMPLE_FACTOR: usize = 8;

/// Full-size channel widths of the four residual stages.
pub const FULL_CHANNELS: [usize; 4] = [128, 256, 256, 512];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no global features for image {0:?}")]
    MissingGlobal(String),
    #[error("{kind} token id {id} out of range for a codebook of {size}")]
    IdOutOfRange { kind: &'static str, id: u32, size: usize },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("{0}")]
    Format(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// Architecture and data dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Training image side length in pixels.
    pub image_size: usize,
    /// Divides [`FULL_CHANNELS`].
    pub width_divisor: usize,
    /// Encoder feature width, the projector's output dim.
    pub d_l: usize,
    /// Global tokens per image.
    pub k_g: usize,
    /// Width of the local (LLM vocabulary) embedding table.
    pub local_dim: usize,
    /// Width of global features and the global embedding table.
    pub global_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            width_divisor: 8,
            d_l: 16,
            k_g: 5,
            local_dim: 32,
            global_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> [usize; 4] {
        FULL_CHANNELS.map(|c| (c / self.width_divisor).max(1))
    }

    /// Token grid for an `height x width` image.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize), TokenizerError> {
        if height == 0 || width == 0 || height % DOWNSAMPLE_FACTOR != 0 || width % DOWNSAMPLE_FACTOR != 0 {
            return Err(TokenizerError::Shape(format!(
                "image {height}x{width} is not divisible by {DOWNSAMPLE_FACTOR}"
            )));
        }
        Ok((height / DOWNSAMPLE_FACTOR, width / DOWNSAMPLE_FACTOR))
    }

    /// Local tokens per training image.
    pub fn k_l(&self) -> usize {
        let side = self.image_size / DOWNSAMPLE_FACTOR;
        side * side
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        self.grid_for(self.image_size, self.image_size)?;
        if self.width_divisor == 0 || self.d_l == 0 || self.k_g == 0 || self.local_dim == 0 || self.global_dim == 0 {
            return Err(TokenizerError::Config("widths, dims and k_g must be positive".into()));
        }
        Ok(())
    }
}

/// Optimization settings. `lambda_perceptual` and `lambda_gan` weight loss
/// terms this implementation does not compute; they are carried so configs
/// describe the complete objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: u64,
    pub beta: f64,
    pub lambda_perceptual: f64,
    pub lambda_gan: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_epochs: 5,
            beta: 0.3,
            lambda_perceptual: 1.0,
            lambda_gan: 0.1,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(TokenizerError::Config(format!(
                "base_lr must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TokenizerError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TokenizerError::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TokenizerError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Global ids plus a row-major grid of local ids for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    pub global_ids: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub local_ids: Vec<u32>,
}

impl TokenMap {
    pub fn new(global_ids: Vec<u32>, height: usize, width: usize, local_ids: Vec<u32>) -> Result<Self, TokenizerError> {
        if local_ids.len() != height * width {
            return Err(TokenizerError::Shape(format!(
                "{} local ids for a {height}x{width} grid",
                local_ids.len()
            )));
        }
        Ok(Self {
            global_ids,
            height,
            width,
            local_ids,
        })
    }

    pub fn k_g(&self) -> usize {
        self.global_ids.len()
    }

    pub fn k_l(&self) -> usize {
        self.local_ids.len()
    }

    /// Total tokens, `K_g + K_l`.
    pub fn len(&self) -> usize {
        self.k_g() + self.k_l()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn local_at(&self, row: usize, col: usize) -> u32 {
        self.local_ids[row * self.width + col]
    }

    pub fn check_ranges(&self, global_size: usize, local_size: usize) -> Result<(), TokenizerError> {
        for (kind, ids, size) in [
            ("global", &self.global_ids, global_size),
            ("local", &self.local_ids, local_size),
        ] {
            if let Some(&id) = ids.iter().find(|&&i| i as usize >= size) {
                return Err(TokenizerError::IdOutOfRange { kind, id, size });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let t = TrainConfig::default();
        assert_eq!((t.base_lr, t.warmup_epochs, t.beta), (5e-4, 5, 0.3));
        assert_eq!((t.lambda_perceptual, t.lambda_gan), (1.0, 0.1));
        let m = ModelConfig::default();
        assert_eq!(m.channels(), [16, 32, 32, 64]);
        assert_eq!(m.k_l(), 16);
        assert_eq!(m.grid_for(128, 128).unwrap(), (16, 16));
        assert!(m.grid_for(30, 32).is_err());
    }

    #[test]
    fn token_map_counts() {
        let m = TokenMap::new(vec![1, 2, 3], 2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!((m.k_g(), m.k_l(), m.len()), (3, 4, 7));
        assert_eq!(m.local_at(1, 0), 2);
        assert!(m.check_ranges(4, 4).is_ok());
        assert!(matches!(
            m.check_ranges(3, 4),
            Err(TokenizerError::IdOutOfRange {
                kind: "global",
                id: 3,
                ..
            })
        ));
        assert!(TokenMap::new(vec![], 2, 2, vec![0]).is_err());
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig {
            epochs: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.warmup_epochs = 1;
        assert!(c.validate().is_ok());
        c.beta = -1.0;
        assert!(c.validate().is_err());
    }
}
