use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, PipelineError, Result};
use crate::attention::{MilConfig, Pooling};
use crate::cluster::ClusterConfig;
use crate::l2g::{L2gConfig, M};
use crate::qhvae::QhvaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sizes {
    pub i1: usize,
    pub i2: usize,
    pub i3: usize,
    /// Close-up tiles per I₃ patch.
    pub m: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes { i1: 32, i2: 128, i3: 256, m: M }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_slides: usize,
    pub test_slides: usize,
    pub rows: usize,
    pub cols: usize,
    /// Tumor share of tissue cells on positive slides; every other slide is negative.
    pub tumor_fraction: f64,
    pub tissue_coverage: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { train_slides: 16, test_slides: 20, rows: 20, cols: 20, tumor_fraction: 0.05, tissue_coverage: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QhvaeTrainSection {
    pub steps: usize,
    pub batch: usize,
    /// Edge of the random training crops.
    pub crop: usize,
    pub lr: f64,
}

impl Default for QhvaeTrainSection {
    fn default() -> Self {
        QhvaeTrainSection { steps: 600, batch: 4, crop: 64, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerSection {
    /// Patch edges of the ensemble members; each is I₂ or I₂/2.
    pub scales: Vec<usize>,
    pub weights: Vec<f64>,
    pub mil: MilConfig,
}

impl Default for ScorerSection {
    fn default() -> Self {
        ScorerSection { scales: vec![128, 64], weights: vec![0.5, 0.5], mil: MilConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSection {
    /// Stage-1 retained percentage.
    pub p1: f64,
    /// Top-p outlines drawn on heatmaps.
    pub heatmap_p: Vec<f64>,
}

impl Default for CascadeSection {
    fn default() -> Self {
        CascadeSection { p1: 5.0, heatmap_p: vec![1.0, 5.0, 20.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L2gTrainSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for L2gTrainSection {
    fn default() -> Self {
        L2gTrainSection { steps: 400, lr: 2e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateSection {
    pub mil: MilConfig,
    /// Training seeds; one report per seed.
    pub seeds: Vec<u64>,
}

impl Default for AggregateSection {
    fn default() -> Self {
        AggregateSection { mil: MilConfig { epochs: 60, ..MilConfig::default() }, seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for slide-level parallelism.
    pub jobs: usize,
    pub sizes: Sizes,
    pub synth: SynthSection,
    pub qhvae: QhvaeConfig,
    pub qhvae_train: QhvaeTrainSection,
    pub scorers: ScorerSection,
    pub cascade: CascadeSection,
    pub cluster: ClusterConfig,
    pub l2g: L2gConfig,
    pub l2g_train: L2gTrainSection,
    pub aggregate: AggregateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            sizes: Sizes::default(),
            synth: SynthSection::default(),
            qhvae: QhvaeConfig::default(),
            qhvae_train: QhvaeTrainSection::default(),
            scorers: ScorerSection::default(),
            cascade: CascadeSection::default(),
            cluster: ClusterConfig::default(),
            l2g: L2gConfig::default(),
            l2g_train: L2gTrainSection::default(),
            aggregate: AggregateSection::default(),
        }
    }
}

impl RunConfig {
    /// Reduced sizes for quick end-to-end runs: I₂ = 64, four 8×8 slides.
    pub fn small() -> Self {
        RunConfig {
            sizes: Sizes { i1: 16, i2: 64, i3: 128, m: M },
            synth: SynthSection { train_slides: 4, test_slides: 4, rows: 8, cols: 8, tumor_fraction: 0.1, ..SynthSection::default() },
            qhvae: QhvaeConfig { widths: vec![8, 12, 16], latent_channels: vec![2, 3, 4], kernel: 3, ..QhvaeConfig::default() },
            qhvae_train: QhvaeTrainSection { steps: 20, batch: 2, crop: 32, lr: 1e-3 },
            scorers: ScorerSection { scales: vec![64, 32], weights: vec![0.5, 0.5], mil: MilConfig { epochs: 5, ..MilConfig::default() } },
            cascade: CascadeSection { p1: 20.0, heatmap_p: vec![1.0, 20.0, 50.0] },
            cluster: ClusterConfig { k: 2, ..ClusterConfig::default() },
            l2g: L2gConfig { i3: 128, global_widths: [8, 12], heads: [2, 2], decoder_widths: [12, 8, 6, 4], ..L2gConfig::default() },
            l2g_train: L2gTrainSection { steps: 10, lr: 2e-3 },
            aggregate: AggregateSection { mil: MilConfig { epochs: 10, ..MilConfig::default() }, seeds: vec![0] },
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| PipelineError::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let s = &self.sizes;
        if s.i1 == 0 || s.i2 != 4 * s.i1 || s.i3 != 2 * s.i2 {
            return bad(format!("sizes must satisfy I3 = 2·I2 and I2 = 4·I1, got {}/{}/{}", s.i1, s.i2, s.i3));
        }
        if s.m != M {
            return bad(format!("M = {} tiles per patch is fixed by the quadrant split, got {}", M, s.m));
        }
        if !(self.cascade.p1 > 0.0 && self.cascade.p1 <= 100.0) {
            return bad(format!("p1 must lie in (0, 100], got {}", self.cascade.p1));
        }
        if self.cascade.heatmap_p.iter().any(|&p| !(p > 0.0 && p <= 100.0)) {
            return bad("heatmap percentages must lie in (0, 100]".into());
        }
        if self.cluster.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.l2g.i3 != s.i3 {
            return bad(format!("l2g.i3 = {} differs from sizes.i3 = {}", self.l2g.i3, s.i3));
        }
        self.qhvae.validate()?;
        if s.i2 % (1 << self.qhvae.levels) != 0 || self.qhvae_train.crop % (1 << self.qhvae.levels) != 0 {
            return bad(format!("I2 and the training crop must be divisible by 2^{}", self.qhvae.levels));
        }
        if self.qhvae_train.crop > s.i2 || self.qhvae_train.batch == 0 {
            return bad("training crops must fit in one I2 tile and batch must be positive".into());
        }
        self.l2g.validate(&self.qhvae)?;
        let sc = &self.scorers;
        if sc.scales.is_empty() || sc.scales.len() != sc.weights.len() {
            return bad(format!("{} scorer scales with {} weights", sc.scales.len(), sc.weights.len()));
        }
        if let Some(&x) = sc.scales.iter().find(|&&x| x != s.i2 && 2 * x != s.i2) {
            return bad(format!("scorer scale {} must be I2 = {} or I2/2", x, s.i2));
        }
        if sc.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || sc.weights.iter().sum::<f64>() <= 0.0 {
            return bad("scorer weights must be non-negative with a positive sum".into());
        }
        if !(0.0..=1.0).contains(&self.synth.tumor_fraction) || self.synth.rows < 2 || self.synth.cols < 2 {
            return bad("tumor fraction must lie in [0, 1] and grids need at least 2×2 cells".into());
        }
        if self.synth.train_slides < 2 || self.synth.test_slides < 2 {
            return bad("each split needs at least two slides (one per class)".into());
        }
        if self.aggregate.seeds.is_empty() {
            return bad("aggregate needs at least one seed".into());
        }
        Ok(())
    }

    pub fn pooling_label(p: Pooling) -> &'static str {
        match p {
            Pooling::Attention => "attention",
            Pooling::Mean => "mean",
        }
    }
}
