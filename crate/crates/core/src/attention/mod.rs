//! Stage-1 sampling: gated-attention MIL scorers at several patch scales,
//! mass-conserving transfer of their attention maps onto one grid, convex
//! fusion and top-p selection.

mod mil;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use mil::{gated_attention_scores, Bag, GatedAttention, MilConfig, MilModel, Pooling};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scale {from} cannot be mapped onto scale {to}")]
    Incommensurate { from: usize, to: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("training needs both classes, got {positives} positive and {negatives} negative bags")]
    SingleClass { positives: usize, negatives: usize },
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// Cell `(row, col)` on a grid of square patches.
pub type Cell = (usize, usize);

/// Tissue cells of one slide at one patch scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub slide_id: String,
    /// Patch edge in pixels.
    pub scale: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major tissue flags.
    pub tissue: Vec<bool>,
}

impl PatchGrid {
    pub fn new(slide_id: &str, scale: usize, rows: usize, cols: usize, tissue: Vec<bool>) -> Result<Self> {
        if tissue.len() != rows * cols {
            return Err(SamplerError::GridMismatch(format!("{} flags for a {}x{} grid", tissue.len(), rows, cols)));
        }
        Ok(PatchGrid { slide_id: slide_id.to_string(), scale, rows, cols, tissue })
    }

    /// Tissue cells in row-major order.
    pub fn cells(&self) -> Vec<Cell> {
        (0..self.rows * self.cols).filter(|&i| self.tissue[i]).map(|i| (i / self.cols, i % self.cols)).collect()
    }

    pub fn len(&self) -> usize {
        self.tissue.iter().filter(|&&t| t).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of a cell.
    pub fn origin(&self, cell: Cell) -> (usize, usize) {
        (cell.0 * self.scale, cell.1 * self.scale)
    }

    /// The grid at half the patch edge whose tissue cells are the four
    /// children of every tissue cell here.
    pub fn refine(&self) -> Result<PatchGrid> {
        if self.scale % 2 != 0 {
            return Err(SamplerError::Incommensurate { from: self.scale, to: self.scale / 2 });
        }
        let (rows, cols) = (self.rows * 2, self.cols * 2);
        let tissue = (0..rows * cols).map(|i| self.tissue[(i / cols / 2) * self.cols + (i % cols) / 2]).collect();
        PatchGrid::new(&self.slide_id, self.scale / 2, rows, cols, tissue)
    }
}

/// Softmax attention of one scorer over the tissue cells of its grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub model_id: usize,
    pub scale: usize,
    pub cells: Vec<Cell>,
    pub scores: Vec<f64>,
}

impl AttentionMap {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// Convex weights over ensemble members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    /// Renormalizes to sum to one; weights must be finite, non-negative and
    /// not all zero.
    pub fn new(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SamplerError::Invalid(format!("ensemble weights {:?} must be finite and non-negative", raw)));
        }
        let s: f64 = raw.iter().sum();
        if s <= 0.0 {
            return Err(SamplerError::Invalid("ensemble weights sum to zero".into()));
        }
        Ok(EnsembleWeights(raw.iter().map(|w| w / s).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(&vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Fused scores on the common grid, with ranks (0 = best).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatchGrid {
    pub scale: usize,
    pub cells: Vec<Cell>,
    pub scores: Vec<f64>,
    pub rank: Vec<usize>,
}

/// Moves attention mass onto the tissue cells of `target`. A finer map sums
/// its children into each parent; a coarser map splits each parent's mass
/// equally among its tissue children in `target`.
pub fn normalize_to_common_grid(map: &AttentionMap, target: &PatchGrid) -> Result<AttentionMap> {
    if map.cells.len() != map.scores.len() {
        return Err(SamplerError::GridMismatch(format!("{} cells, {} scores", map.cells.len(), map.scores.len())));
    }
    let cells = target.cells();
    let index: HashMap<Cell, usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut out = vec![0.0; cells.len()];
    let unplaced = |c: Cell| SamplerError::GridMismatch(format!("cell {:?} at scale {} has no tissue cell on the target grid", c, map.scale));
    if map.scale == target.scale {
        for (&c, &s) in map.cells.iter().zip(&map.scores) {
            out[*index.get(&c).ok_or_else(|| unplaced(c))?] += s;
        }
    } else if map.scale < target.scale && target.scale % map.scale == 0 {
        let f = target.scale / map.scale;
        for (&c, &s) in map.cells.iter().zip(&map.scores) {
            let parent = (c.0 / f, c.1 / f);
            out[*index.get(&parent).ok_or_else(|| unplaced(c))?] += s;
        }
    } else if map.scale > target.scale && map.scale % target.scale == 0 {
        let f = map.scale / target.scale;
        for (&c, &s) in map.cells.iter().zip(&map.scores) {
            let kids: Vec<usize> = (0..f * f)
                .filter_map(|k| index.get(&(c.0 * f + k / f, c.1 * f + k % f)).copied())
                .collect();
            if kids.is_empty() {
                return Err(unplaced(c));
            }
            let share = s / kids.len() as f64;
            for k in kids {
                out[k] += share;
            }
        }
    } else {
        return Err(SamplerError::Incommensurate { from: map.scale, to: target.scale });
    }
    Ok(AttentionMap { model_id: map.model_id, scale: target.scale, cells, scores: out })
}

/// `A_m = Σ_n w_n A_m^(n)` on one shared grid.
pub fn fuse_scores(maps: &[AttentionMap], weights: &EnsembleWeights) -> Result<ScoredPatchGrid> {
    let Some(first) = maps.first() else {
        return Err(SamplerError::Invalid("no attention maps to fuse".into()));
    };
    if maps.len() != weights.values().len() {
        return Err(SamplerError::Invalid(format!("{} maps, {} weights", maps.len(), weights.values().len())));
    }
    for m in maps {
        if m.scale != first.scale || m.cells != first.cells || m.scores.len() != first.cells.len() {
            return Err(SamplerError::GridMismatch(format!("map {} is not on the grid of map {}", m.model_id, first.model_id)));
        }
    }
    let scores: Vec<f64> = (0..first.cells.len())
        .map(|i| maps.iter().zip(weights.values()).map(|(m, w)| w * m.scores[i]).sum())
        .collect();
    let order = ranking(&first.cells, &scores);
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    Ok(ScoredPatchGrid { scale: first.scale, cells: first.cells.clone(), scores, rank })
}

/// Indices sorted by score descending, then row, then column.
fn ranking(cells: &[Cell], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(cells[a].cmp(&cells[b])));
    order
}

/// The `⌈p·K/100⌉` best cells, best first.
pub fn select_top_p(grid: &ScoredPatchGrid, p: f64) -> Result<Vec<Cell>> {
    if grid.cells.is_empty() {
        return Err(SamplerError::Invalid("cannot select from an empty grid".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(SamplerError::Invalid(format!("p = {} outside (0, 100]", p)));
    }
    let n = ((p * grid.cells.len() as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    let n = n.min(grid.cells.len());
    let mut order: Vec<usize> = (0..grid.cells.len()).collect();
    order.sort_by_key(|&i| grid.rank[i]);
    Ok(order[..n].iter().map(|&i| grid.cells[i]).collect())
}
