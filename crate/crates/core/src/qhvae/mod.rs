//! Quantized hierarchical VAE.
//!
//! A bottom-up encoder produces one feature map per level. The top-down
//! decoder starts from a learned constant and, level by level, predicts a
//! Gaussian prior, injects a latent and refines its state. At inference the
//! latent is the prior mean plus an integer residual, which is what gets
//! entropy coded.

mod coding;
mod model;
pub mod rate;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

pub use coding::{compress, decompress, Compressed, Decompressed};
pub use model::{pool, quantize_latent, round_half_away, LatentLevel, Mode, Pass, Qhvae, PRIOR_MEAN_GRID};
pub use train::{psnr_from_mse, rd_loss, train_loss, LossParts, QhvaeTrainer, TrainMetrics};

#[derive(Debug, Error)]
pub enum QhvaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("level {0}: encoder features are required in this mode")]
    MissingEncoderFeatures(usize),
    #[error("level {0}: no latent supplied for decompression")]
    MissingLatent(usize),
    #[error("non-finite loss ({detail}){}", .level.map(|l| format!(" first seen at level {}", l)).unwrap_or_default())]
    NonFinite { level: Option<usize>, detail: String },
    #[error("stream does not match the model: {0}")]
    HeaderMismatch(String),
}

pub type Result<T, E = QhvaeError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QhvaeConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    pub latent_channels: Vec<usize>,
    pub input_size: usize,
    pub lambda: f64,
    pub kernel: usize,
    /// Level whose decoder state is pooled into the downstream feature vector.
    pub feature_level: usize,
}

impl Default for QhvaeConfig {
    fn default() -> Self {
        QhvaeConfig {
            levels: 3,
            widths: vec![32, 64, 96],
            latent_channels: vec![4, 8, 16],
            input_size: 64,
            lambda: 2048.0,
            kernel: 7,
            feature_level: 3,
        }
    }
}

impl QhvaeConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        QhvaeConfig {
            levels: 2,
            widths: vec![4, 6],
            latent_channels: vec![2, 3],
            input_size: 16,
            lambda: 64.0,
            kernel: 3,
            feature_level: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QhvaeError::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.widths.len() != self.levels || self.latent_channels.len() != self.levels {
            return bad(format!(
                "{} levels need {0} widths and latent channel counts, got {} and {}",
                self.levels,
                self.widths.len(),
                self.latent_channels.len()
            ));
        }
        if self.widths.iter().chain(&self.latent_channels).any(|&c| c == 0) {
            return bad("widths and latent channels must be positive".into());
        }
        if self.input_size == 0 || self.input_size % (1 << self.levels) != 0 {
            return bad(format!("input size {} not divisible by 2^{}", self.input_size, self.levels));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !(1..=self.levels).contains(&self.feature_level) {
            return bad(format!("feature level {} outside 1..={}", self.feature_level, self.levels));
        }
        Ok(())
    }

    /// Spatial extent of level `l` (1-based) for an input of `size` pixels.
    pub fn extent(&self, size: usize, level: usize) -> usize {
        size >> level
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[self.feature_level - 1]
    }
}
