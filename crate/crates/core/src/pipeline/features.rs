//! Codec features of tissue cells for the scorers and the clustering stage.

use super::featfile::FeatureRow;
use super::ingest::IngestedSlide;
use super::{PipelineError, Result};
use crate::attention::{Cell, PatchGrid};
use crate::cluster::FeatureMatrix;
use crate::qhvae::Qhvae;
use crate::tensor::{ParamStore, Tensor};

/// Per tissue cell: the pooled feature map, then its four quadrant pools
/// (top-left, top-right, bottom-left, bottom-right), `5·D` values.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatures {
    pub slide_id: String,
    pub dim: usize,
    pub cells: Vec<Cell>,
    pub values: Vec<Vec<f32>>,
}

/// Mean of the whole map and of each quadrant of a `[C, H, W]` map.
pub fn pool_with_quadrants(map: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (hh, hw) = (h / 2, w / 2);
    let mut out = vec![0f32; 5 * c];
    for ch in 0..c {
        let plane = &map[ch * h * w..(ch + 1) * h * w];
        let mut q = [0f64; 4];
        for y in 0..h {
            for x in 0..w {
                q[(y / hh.max(1)).min(1) * 2 + (x / hw.max(1)).min(1)] += plane[y * w + x] as f64;
            }
        }
        out[ch] = (q.iter().sum::<f64>() / (h * w) as f64) as f32;
        for (k, v) in q.iter().enumerate() {
            out[(1 + k) * c + ch] = (v / (hh * hw).max(1) as f64) as f32;
        }
    }
    out
}

impl CellFeatures {
    pub fn compute(qhvae: &Qhvae, store: &ParamStore<f32>, slide: &IngestedSlide) -> Result<Self> {
        let cells = slide.grid.cells();
        let mut values = Vec::with_capacity(cells.len());
        let mut dim = qhvae.cfg.feature_dim();
        for &cell in &cells {
            let x = slide.cell(cell)?;
            let s = x.shape()[1];
            let map = qhvae.feature_map(store, &x.reshape(vec![1, 3, s, s])?)?;
            let (_, c, h, w) = map.dims4("cell features")?;
            if h < 2 || w < 2 {
                return Err(PipelineError::Invalid(format!("{}x{} feature map cannot be split into quadrants", h, w)));
            }
            dim = c;
            values.push(pool_with_quadrants(map.data(), c, h, w));
        }
        Ok(CellFeatures { slide_id: slide.grid.slide_id.clone(), dim, cells, values })
    }

    pub fn rows(&self) -> Vec<FeatureRow> {
        self.cells.iter().zip(&self.values).map(|(&cell, v)| FeatureRow { slide_id: self.slide_id.clone(), cell, values: v.clone() }).collect()
    }

    pub fn from_rows(slide_id: &str, rows: &[FeatureRow]) -> Result<Self> {
        let mine: Vec<&FeatureRow> = rows.iter().filter(|r| r.slide_id == slide_id).collect();
        let dim = mine.first().map_or(0, |r| r.values.len() / 5);
        if mine.iter().any(|r| r.values.len() != 5 * dim || dim == 0) {
            return Err(PipelineError::Invalid(format!("codec features of {} are not 5 equal pools", slide_id)));
        }
        Ok(CellFeatures {
            slide_id: slide_id.to_string(),
            dim,
            cells: mine.iter().map(|r| r.cell).collect(),
            values: mine.iter().map(|r| r.values.clone()).collect(),
        })
    }

    /// Instances of the scorer at patch edge `scale` over `grid` (the level-0
    /// grid): pooled features at the grid scale, quadrant features on the
    /// refined grid at half of it.
    pub fn bag(&self, grid: &PatchGrid, scale: usize) -> Result<(PatchGrid, Tensor<f32>)> {
        if self.cells != grid.cells() {
            return Err(PipelineError::Invalid(format!("features of {} do not match its tissue grid", self.slide_id)));
        }
        let d = self.dim;
        if scale == grid.scale {
            let data = self.values.iter().flat_map(|v| v[..d].iter().copied()).collect();
            Ok((grid.clone(), Tensor::new(vec![self.cells.len(), d], data)?))
        } else if 2 * scale == grid.scale {
            let fine = grid.refine()?;
            let index: std::collections::HashMap<Cell, usize> = self.cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let cells = fine.cells();
            let mut data = Vec::with_capacity(cells.len() * d);
            for (r, c) in &cells {
                let v = &self.values[index[&(r / 2, c / 2)]];
                let q = (r % 2) * 2 + c % 2;
                data.extend_from_slice(&v[(1 + q) * d..(2 + q) * d]);
            }
            Ok((fine, Tensor::new(vec![cells.len(), d], data)?))
        } else {
            Err(PipelineError::Invalid(format!("no scorer features at scale {} for a {}-pixel grid", scale, grid.scale)))
        }
    }
}

/// Flattened feature maps of the given cells, one row each.
pub fn flattened(qhvae: &Qhvae, store: &ParamStore<f32>, slide: &IngestedSlide, cells: &[Cell]) -> Result<FeatureMatrix> {
    let mut data = Vec::new();
    let mut cols = 0;
    for &cell in cells {
        let x = slide.cell(cell)?;
        let s = x.shape()[1];
        let map = qhvae.feature_map(store, &x.reshape(vec![1, 3, s, s])?)?;
        cols = map.len();
        data.extend(map.data().iter().map(|&v| v as f64));
    }
    Ok(FeatureMatrix::new(cols, data, cells.to_vec())?)
}
