//! Offline training pipeline: float training with block-circulant FC layers
//! and cosine normalization, ADMM filter pruning, and Q15 export.

pub mod admm;
pub mod arch;
pub mod config;
pub mod data;
pub mod export;
pub mod net;
pub mod train;

pub use admm::{admm_prune, PruneReport};
pub use arch::{Arch, ArchSpec, LayerSpec};
pub use config::TrainConfig;
pub use data::Dataset;
pub use export::{export_quantized, CalibrationReport, Export, ExportOptions};
pub use net::{cosine_normalize_forward, Network};
pub use train::{train, EpochStats, Trainer};

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset file not found: {0}")]
    DatasetMissing(PathBuf),
    #[error("malformed dataset: {0}")]
    BadDataset(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("layer {layer}: cannot retain {retain} filters out of {available}")]
    InfeasibleTarget { layer: usize, retain: usize, available: usize },
    #[error("layer {layer}: {what} {value} outside [-1, 1)")]
    RangeViolation { layer: usize, what: String, value: f64 },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("network file: {0}")]
    Format(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ehdl_core::model::ModelError),
    #[error(transparent)]
    Inference(#[from] ehdl_core::inference::InferenceError),
}

impl Network {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network, TrainError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
