//! The two-stage cascade on one slide: ensemble attention, fusion and
//! top-p₁ selection, then clustering and balanced sampling of the survivors.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::features::{flattened, CellFeatures};
use super::ingest::IngestedSlide;
use super::{PipelineError, Result};
use crate::attention::{fuse_scores, normalize_to_common_grid, select_top_p, AttentionMap, Bag, Cell, EnsembleWeights, MilModel, PatchGrid, ScoredPatchGrid};
use crate::cluster::{self, ClusterConfig, Selection};
use crate::qhvae::Qhvae;
use crate::tensor::{ParamStore, RngSeed};

pub struct Scorer {
    pub scale: usize,
    pub model: MilModel,
}

/// One scorer per configured scale, trained on slide-labelled bags.
pub fn train_scorers(train: &[(&CellFeatures, &PatchGrid, bool)], cfg: &RunConfig, seed: RngSeed) -> Result<Vec<Scorer>> {
    let mut out = Vec::new();
    for (n, &scale) in cfg.scorers.scales.iter().enumerate() {
        let mut bags = Vec::new();
        for (f, g, label) in train {
            if g.is_empty() {
                continue;
            }
            bags.push(Bag { features: f.bag(g, scale)?.1, label: *label });
        }
        let model = MilModel::train(&bags, &cfg.scorers.mil, seed.derive_str("scorer").derive(n as u64))?;
        out.push(Scorer { scale, model });
    }
    Ok(out)
}

pub struct Stage1 {
    /// Per scorer, on its own grid.
    pub maps: Vec<AttentionMap>,
    pub fused: ScoredPatchGrid,
    /// Best first.
    pub selected: Vec<Cell>,
}

pub fn fused_scores(feats: &CellFeatures, grid: &PatchGrid, scorers: &[Scorer], weights: &[f64]) -> Result<(Vec<AttentionMap>, ScoredPatchGrid)> {
    if grid.is_empty() {
        return Err(PipelineError::Invalid(format!("{} has no tissue cells", grid.slide_id)));
    }
    let mut maps = Vec::new();
    let mut common = Vec::new();
    for (n, s) in scorers.iter().enumerate() {
        let (g, x) = feats.bag(grid, s.scale)?;
        let map = AttentionMap { model_id: n, scale: s.scale, cells: g.cells(), scores: s.model.attention(&x)? };
        common.push(normalize_to_common_grid(&map, grid)?);
        maps.push(map);
    }
    let fused = fuse_scores(&common, &EnsembleWeights::new(weights)?)?;
    Ok((maps, fused))
}

pub fn stage1(feats: &CellFeatures, grid: &PatchGrid, scorers: &[Scorer], weights: &[f64], p1: f64) -> Result<Stage1> {
    let (maps, fused) = fused_scores(feats, grid, scorers, weights)?;
    let selected = select_top_p(&fused, p1)?;
    Ok(Stage1 { maps, fused, selected })
}

pub struct Stage2 {
    pub selection: Selection,
    /// Representative cells with their cluster, in survivor order.
    pub representatives: Vec<(Cell, usize)>,
}

pub fn stage2(qhvae: &Qhvae, store: &ParamStore<f32>, slide: &IngestedSlide, survivors: &[Cell], cfg: &ClusterConfig, seed: RngSeed) -> Result<Stage2> {
    let x = flattened(qhvae, store, slide, survivors)?;
    let selection = cluster::select(&x, cfg, seed)?;
    let mut rows = selection.rows.clone();
    rows.sort_unstable();
    let representatives = rows.iter().map(|&r| (x.ids[r], selection.model.assignments[r])).collect();
    Ok(Stage2 { selection, representatives })
}

/// `|a ∩ b| / |a ∪ b|`; zero when both are empty.
pub fn iou(a: &[Cell], b: &[Cell]) -> f64 {
    let sa: std::collections::BTreeSet<Cell> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<Cell> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Selected-patch record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedPatch {
    pub slide_id: String,
    pub row: usize,
    pub col: usize,
    pub scale: usize,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster: Option<usize>,
}

/// Per-slide cascade summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeRecord {
    pub slide_id: String,
    pub label: Option<bool>,
    pub tissue: usize,
    pub stage1: usize,
    pub k: usize,
    pub m_min: usize,
    pub representatives: usize,
    /// Top-p₁ overlap with the planted mask, for slides whose mask is non-empty.
    pub iou: Option<f64>,
    /// Representatives over tissue cells.
    pub count_ratio: f64,
    /// Pixels of the representative I₃ patches over tissue pixels.
    pub area_ratio: f64,
}

pub struct SlideCascade {
    pub stage1: Stage1,
    pub stage2: Stage2,
    pub record: CascadeRecord,
}

impl SlideCascade {
    pub fn score_of(&self, cell: Cell) -> f64 {
        let f = &self.stage1.fused;
        f.cells.iter().position(|&c| c == cell).map_or(0.0, |i| f.scores[i])
    }

    pub fn stage1_records(&self) -> Vec<SelectedPatch> {
        let s = &self.record.slide_id;
        let scale = self.stage1.fused.scale;
        self.stage1
            .selected
            .iter()
            .map(|&(row, col)| SelectedPatch { slide_id: s.clone(), row, col, scale, score: self.score_of((row, col)), cluster: None })
            .collect()
    }

    pub fn representative_records(&self) -> Vec<SelectedPatch> {
        let s = &self.record.slide_id;
        let scale = self.stage1.fused.scale;
        self.stage2
            .representatives
            .iter()
            .map(|&((row, col), k)| SelectedPatch { slide_id: s.clone(), row, col, scale, score: self.score_of((row, col)), cluster: Some(k) })
            .collect()
    }
}

pub fn run_slide(
    qhvae: &Qhvae,
    store: &ParamStore<f32>,
    slide: &IngestedSlide,
    feats: &CellFeatures,
    scorers: &[Scorer],
    cfg: &RunConfig,
    seed: RngSeed,
) -> Result<SlideCascade> {
    let grid = &slide.grid;
    let s1 = stage1(feats, grid, scorers, &cfg.scorers.weights, cfg.cascade.p1)?;
    let s2 = stage2(qhvae, store, slide, &s1.selected, &cfg.cluster, seed.derive_str("stage2").derive_str(&grid.slide_id))?;
    let mask = slide.mask_cells();
    let tissue = grid.len();
    let reps = s2.representatives.len();
    let record = CascadeRecord {
        slide_id: grid.slide_id.clone(),
        label: slide.manifest.label,
        tissue,
        stage1: s1.selected.len(),
        k: s2.selection.model.k,
        m_min: s2.selection.m_min,
        representatives: reps,
        iou: (!mask.is_empty()).then(|| iou(&s1.selected, &mask)),
        count_ratio: reps as f64 / tissue as f64,
        area_ratio: (reps * 4) as f64 / tissue as f64,
    };
    Ok(SlideCascade { stage1: s1, stage2: s2, record })
}
