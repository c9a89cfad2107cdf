//! Orchestration: synthetic slides, tile ingestion, the two-stage cascade,
//! training commands, metrics, aggregation and heatmaps.

pub mod abmil;
pub mod cascade;
pub mod commands;
pub mod config;
pub mod featfile;
pub mod features;
pub mod heatmap;
pub mod ingest;
pub mod metrics;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attention::SamplerError;
use crate::cluster::ClusterError;
use crate::codec::CodecError;
use crate::l2g::L2gError;
use crate::qhvae::QhvaeError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}:{line}: {detail}")]
    Record { path: PathBuf, line: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{} tile problem(s) in {slide}: {}", problems.len(), problems.join("; "))]
    Tiles { slide: String, problems: Vec<String> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Qhvae(#[from] QhvaeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    L2g(#[from] L2gError),
}

impl PipelineError {
    /// Stable short name for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Image { .. } => "image",
            PipelineError::Record { .. } => "record",
            PipelineError::Config(_) => "config",
            PipelineError::Tiles { .. } => "tiles",
            PipelineError::Invalid(_) => "invalid",
            PipelineError::Tensor(_) => "tensor",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Codec(_) => "codec",
            PipelineError::Qhvae(_) => "qhvae",
            PipelineError::Sampler(_) => "sampler",
            PipelineError::Cluster(_) => "cluster",
            PipelineError::L2g(_) => "l2g",
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Writes one JSON object per line.
pub(crate) fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| PipelineError::Invalid(e.to_string()))?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| PipelineError::Record { path: path.into(), line: 0, detail: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Record { path: path.into(), line: i + 1, detail: e.to_string() }))
        .collect()
}
