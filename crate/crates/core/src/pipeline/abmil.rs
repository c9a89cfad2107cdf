//! Slide classification from per-patch features with a gated-attention
//! (or mean-pooling) MIL aggregator.

use serde::{Deserialize, Serialize};

use super::featfile::FeatureRow;
use super::ingest::Split;
use super::metrics::{accuracy, auc};
use super::{PipelineError, Result};
use crate::attention::{Bag, MilConfig, MilModel, Pooling};
use crate::tensor::{RngSeed, Tensor};

#[derive(Clone, Debug)]
pub struct SlideBag {
    pub slide_id: String,
    pub label: bool,
    pub split: Split,
    pub features: Tensor<f32>,
}

/// Groups feature rows by slide, in order of first appearance.
pub fn bags_from_rows(rows: &[FeatureRow], meta: impl Fn(&str) -> Option<(bool, Split)>) -> Result<Vec<SlideBag>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&FeatureRow>> = Default::default();
    for r in rows {
        if !groups.contains_key(&r.slide_id) {
            order.push(r.slide_id.clone());
        }
        groups.entry(r.slide_id.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for id in order {
        let Some((label, split)) = meta(&id) else { continue };
        let g = &groups[&id];
        let d = g[0].values.len();
        let data = g.iter().flat_map(|r| r.values.iter().copied()).collect();
        out.push(SlideBag { slide_id: id, label, split, features: Tensor::new(vec![g.len(), d], data)? });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: bool,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seed: u64,
    pub pooling: Pooling,
    pub train_slides: usize,
    pub test_slides: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub predictions: Vec<SlidePrediction>,
}

/// Trains on the train split and scores the test split.
pub fn aggregate(bags: &[SlideBag], cfg: &MilConfig, pooling: Pooling, seed: u64) -> Result<(MilModel, AggregateReport)> {
    let train: Vec<Bag> = bags.iter().filter(|b| b.split == Split::Train).map(|b| Bag { features: b.features.clone(), label: b.label }).collect();
    let pos = train.iter().filter(|b| b.label).count();
    if pos < 2 || train.len() - pos < 2 {
        return Err(PipelineError::Invalid(format!("aggregation needs at least 2 training slides per class, got {} positive and {} negative", pos, train.len() - pos)));
    }
    let test: Vec<&SlideBag> = bags.iter().filter(|b| b.split == Split::Test).collect();
    if test.is_empty() {
        return Err(PipelineError::Invalid("no test slides to evaluate".into()));
    }
    let cfg = MilConfig { pooling, ..cfg.clone() };
    let model = MilModel::train(&train, &cfg, RngSeed(seed).derive_str("aggregate"))?;
    let mut predictions = Vec::new();
    for b in &test {
        predictions.push(SlidePrediction { slide_id: b.slide_id.clone(), label: b.label, prob: model.predict(&b.features)?.0 });
    }
    let probs: Vec<f64> = predictions.iter().map(|p| p.prob).collect();
    let labels: Vec<bool> = predictions.iter().map(|p| p.label).collect();
    let report = AggregateReport {
        seed,
        pooling,
        train_slides: train.len(),
        test_slides: test.len(),
        accuracy: accuracy(&probs, &labels),
        auc: auc(&probs, &labels).unwrap_or(f64::NAN),
        predictions,
    };
    Ok((model, report))
}
