//! Local-to-global reconstruction of a high-resolution patch from a
//! downsampled distant view and the frozen codec's features of its four
//! quadrant tiles.

mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qhvae::{QhvaeConfig, QhvaeError};
use crate::tensor::resize::bicubic;
use crate::tensor::{Tensor, TensorError};

pub use model::{hierarchical_l1_loss, slide_feature, Forward, L2g, LocalFeatures};
pub use train::{Inference, L2gMetrics, L2gTrainer, PreparedPatch};

#[derive(Debug, Error)]
pub enum L2gError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Qhvae(#[from] QhvaeError),
    #[error("config: {0}")]
    Config(String),
    #[error("quadrant mismatch: {0}")]
    Quadrant(String),
    #[error("non-finite loss at step {step}: per-scale L1 {per_scale:?}")]
    NonFinite { step: u64, per_scale: Vec<f64> },
}

pub type Result<T, E = L2gError> = std::result::Result<T, E>;

/// Number of close-up tiles per patch.
pub const M: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L2gConfig {
    /// Edge of the reconstructed patch; tiles and the distant view are half.
    pub i3: usize,
    /// Global widths before and after the patch merge.
    pub global_widths: [usize; 2],
    /// Swin blocks per stage, alternating plain and shifted windows.
    pub depth: usize,
    pub window: usize,
    pub heads: [usize; 2],
    /// Decoder widths at `I₃/8, I₃/4, I₃/2, I₃`.
    pub decoder_widths: [usize; 4],
}

impl Default for L2gConfig {
    fn default() -> Self {
        L2gConfig { i3: 256, global_widths: [32, 64], depth: 2, window: 8, heads: [2, 4], decoder_widths: [48, 24, 12, 8] }
    }
}

impl L2gConfig {
    pub fn tiny() -> Self {
        L2gConfig { i3: 32, global_widths: [4, 6], depth: 2, window: 4, heads: [1, 2], decoder_widths: [5, 4, 3, 3] }
    }

    pub fn tile(&self) -> usize {
        self.i3 / 2
    }

    /// Edge of the global feature grid, `I₃/8`.
    pub fn grid(&self) -> usize {
        self.i3 / 8
    }

    /// Edges of the four supervised scales, coarsest first.
    pub fn scales(&self) -> [usize; 4] {
        [self.i3 / 8, self.i3 / 4, self.i3 / 2, self.i3]
    }

    /// Checks the branch geometry against the codec that supplies local features.
    pub fn validate(&self, qhvae: &QhvaeConfig) -> Result<()> {
        let bad = |m: String| Err(L2gError::Config(m));
        if self.i3 == 0 || self.i3 % 16 != 0 {
            return bad(format!("I3 = {} must be a positive multiple of 16", self.i3));
        }
        let g = self.grid();
        let stage1 = self.tile() / 2;
        if self.window == 0 || stage1 % self.window != 0 || (g % self.window != 0 && g > self.window) {
            return bad(format!("window {} does not tile the {}- and {}-wide global stages", self.window, stage1, g));
        }
        for (c, h) in self.global_widths.iter().zip(&self.heads) {
            if *h == 0 || c % h != 0 {
                return bad(format!("{} heads do not divide width {}", h, c));
            }
        }
        if self.decoder_widths.iter().chain(&self.global_widths).any(|&c| c == 0) || self.depth == 0 {
            return bad("widths and depth must be positive".into());
        }
        let local = qhvae.extent(self.tile(), qhvae.feature_level);
        if local * 2 != g {
            return Err(L2gError::Quadrant(format!(
                "codec features of a {}-pixel tile are {}x{}, a quadrant of the {}x{} global grid needs {}",
                self.tile(),
                local,
                local,
                g,
                g,
                g / 2
            )));
        }
        Ok(())
    }
}

/// Distant view and four quadrant tiles of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewInput {
    pub distant: Tensor<f32>,
    /// Top-left, top-right, bottom-left, bottom-right.
    pub tiles: [Tensor<f32>; M],
}

fn as_chw(patch: &Tensor<f32>) -> Result<(usize, usize)> {
    match patch.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(L2gError::Config(format!("patch must be [3, H, W], got {:?}", s))),
    }
}

/// Splits `[3, I₃, I₃]` into quadrants and a bicubic distant view at the tile size.
pub fn make_views(patch: &Tensor<f32>) -> Result<MultiViewInput> {
    let (h, w) = as_chw(patch)?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 {
        return Err(L2gError::Config(format!("patch extent {}x{} must be even", h, w)));
    }
    let (th, tw) = (h / 2, w / 2);
    let x = patch.reshape(vec![1, 3, h, w])?;
    let tile = |y0, x0| x.crop(y0, x0, th, tw)?.reshape(vec![3, th, tw]);
    let tiles = [tile(0, 0)?, tile(0, tw)?, tile(th, 0)?, tile(th, tw)?];
    let distant = bicubic(&x, th, tw)?.reshape(vec![3, th, tw])?;
    Ok(MultiViewInput { distant, tiles })
}

/// Inverse of the tile split.
pub fn assemble_tiles(tiles: &[Tensor<f32>; M]) -> Result<Tensor<f32>> {
    let (th, tw) = as_chw(&tiles[0])?;
    let mut out = Tensor::zeros(vec![3, 2 * th, 2 * tw]);
    for (m, t) in tiles.iter().enumerate() {
        if t.shape() != [3, th, tw] {
            return Err(L2gError::Quadrant(format!("tile {} is {:?}", m, t.shape())));
        }
        let (y0, x0) = ((m / 2) * th, (m % 2) * tw);
        for c in 0..3 {
            for y in 0..th {
                let src = &t.data()[(c * th + y) * tw..(c * th + y + 1) * tw];
                let at = (c * 2 * th + y0 + y) * 2 * tw + x0;
                out.data_mut()[at..at + tw].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Ground truth at the four supervised scales, coarsest first.
pub fn targets(patch: &Tensor<f32>, cfg: &L2gConfig) -> Result<Vec<Tensor<f32>>> {
    let (h, w) = as_chw(patch)?;
    if (h, w) != (cfg.i3, cfg.i3) {
        return Err(L2gError::Config(format!("patch {}x{} does not match I3 = {}", h, w, cfg.i3)));
    }
    let x = patch.reshape(vec![1, 3, h, w])?;
    cfg.scales().iter().map(|&s| Ok(if s == h { x.clone() } else { bicubic(&x, s, s)? })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use rand::Rng;

    #[test]
    fn tiles_partition_the_patch() {
        let mut rng = RngSeed(0).rng();
        let p = Tensor::from_fn(vec![3, 32, 32], |_| rng.random::<f32>());
        let v = make_views(&p).unwrap();
        assert_eq!(assemble_tiles(&v.tiles).unwrap(), p);
        assert_eq!(v.distant.shape(), &[3, 16, 16]);
        assert_eq!(v.tiles[1].at(&[2, 0, 0]), p.at(&[2, 0, 16]));
        assert_eq!(v.tiles[2].at(&[0, 3, 5]), p.at(&[0, 19, 5]));
    }

    #[test]
    fn constant_patch_gives_constant_views() {
        let p = Tensor::full(vec![3, 64, 64], 0.375f32);
        let v = make_views(&p).unwrap();
        assert!(v.distant.data().iter().all(|&x| (x - 0.375).abs() < 1e-6));
        assert!(v.tiles.iter().all(|t| t.data().iter().all(|&x| x == 0.375)));
    }

    #[test]
    fn odd_extent_is_rejected() {
        assert!(make_views(&Tensor::zeros(vec![3, 31, 31])).is_err());
        assert!(make_views(&Tensor::zeros(vec![1, 3, 32, 32])).is_err());
    }

    #[test]
    fn desk_geometry() {
        let cfg = L2gConfig::default();
        assert_eq!(cfg.scales(), [32, 64, 128, 256]);
        assert_eq!(cfg.tile(), 128);
        cfg.validate(&QhvaeConfig::default()).unwrap();
        let shallow = QhvaeConfig { feature_level: 2, ..QhvaeConfig::default() };
        assert!(matches!(cfg.validate(&shallow), Err(L2gError::Quadrant(_))));
        let t = targets(&Tensor::full(vec![3, 256, 256], 0.5f32), &cfg).unwrap();
        let sizes: Vec<usize> = t.iter().map(|x| x.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 64, 128, 256]);
    }
}
