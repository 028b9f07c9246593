//! `key = value` training configuration.

use crate::TrainError;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Maximum random translation in pixels; 0 disables augmentation.
    pub shift: usize,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    pub rho: f64,
    pub admm_iterations: usize,
    /// Epochs of penalized training per ADMM iteration.
    pub admm_epochs: usize,
    pub retrain_epochs: usize,
    pub calibration_samples: usize,
    /// (layer index, filters kept).
    pub retain: Vec<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 1,
            shift: 0,
            train_limit: None,
            rho: 1e-3,
            admm_iterations: 3,
            admm_epochs: 1,
            retrain_epochs: 2,
            calibration_samples: 256,
            retain: Vec::new(),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> TrainError {
    TrainError::Config { line, msg: msg.into() }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, val) = body.split_once('=').ok_or_else(|| bad(line, "expected key = value"))?;
            let (key, val) = (key.trim(), val.trim());
            fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, TrainError> {
                v.parse().map_err(|_| bad(line, format!("invalid value for {key}: {v:?}")))
            }
            match key {
                "epochs" => c.epochs = num(line, key, val)?,
                "learning_rate" => c.learning_rate = num(line, key, val)?,
                "momentum" => c.momentum = num(line, key, val)?,
                "batch_size" => c.batch_size = num(line, key, val)?,
                "weight_decay" => c.weight_decay = num(line, key, val)?,
                "seed" => c.seed = num(line, key, val)?,
                "shift" => c.shift = num(line, key, val)?,
                "train_limit" => c.train_limit = Some(num(line, key, val)?),
                "rho" => c.rho = num(line, key, val)?,
                "admm_iterations" => c.admm_iterations = num(line, key, val)?,
                "admm_epochs" => c.admm_epochs = num(line, key, val)?,
                "retrain_epochs" => c.retrain_epochs = num(line, key, val)?,
                "calibration_samples" => c.calibration_samples = num(line, key, val)?,
                _ => match key.strip_prefix("retain.") {
                    Some(layer) => {
                        let layer = num(line, key, layer)?;
                        c.retain.retain(|&(l, _)| l != layer);
                        c.retain.push((layer, num(line, key, val)?));
                    }
                    None => return Err(bad(line, format!("unknown key {key:?}"))),
                },
            }
        }
        if c.batch_size == 0 {
            return Err(bad(0, "batch_size must be positive"));
        }
        if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) {
            return Err(bad(0, "learning_rate must be positive"));
        }
        c.retain.sort_unstable();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
