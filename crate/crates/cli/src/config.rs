//! Effective configuration: command-line flags over a JSON config file over
//! built-in defaults.

use std::fs;
use std::path::Path;

use pinpoint_core::anomaly_map::InferConfig;
use pinpoint_core::metrics::DEFAULT_LIMITS;
use pinpoint_core::student::TrainConfig;
use pinpoint_core::synthetic::SyntheticConfig;
use pinpoint_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::{InferFlags, TrainFlags};

/// Layout of a `--config` file. Every section and field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// FPR integration limits; ascending or not, reported in the given order.
    pub limits: Option<Vec<f64>>,
    pub synthetic: SyntheticConfig,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn apply_train(mut base: TrainConfig, flags: &TrainFlags) -> Result<TrainConfig> {
    if let Some(v) = flags.layers {
        base.layer_pair = v;
    }
    if let Some(v) = flags.epochs {
        base.epochs = v;
    }
    if let Some(v) = flags.learning_rate {
        base.learning_rate = v;
    }
    if let Some(v) = flags.loss {
        base.loss_distance = v;
    }
    if let Some(v) = flags.loss_reduction {
        base.loss_reduction = v;
    }
    if let Some(v) = flags.seed {
        base.seed = v;
    }
    if let Some(v) = flags.hidden_units {
        base.hidden_units = Some(v);
    }
    base.validate()?;
    Ok(base)
}

pub fn apply_infer(mut base: InferConfig, flags: &InferFlags) -> Result<InferConfig> {
    if let Some(v) = flags.infer_distance {
        base.infer_distance = v;
    }
    if let Some(v) = flags.fusion {
        base.fusion = v;
    }
    if let Some(v) = flags.sigma {
        base.smoothing_sigma = v;
    }
    if let Some(v) = flags.top_fraction {
        base.top_fraction = v;
    }
    if let Some(v) = flags.smooth_before_crop {
        base.smooth_before_crop = v;
    }
    base.validate()?;
    Ok(base)
}

pub fn limits(file: &FileConfig, flag: Option<&[f64]>) -> Result<Vec<f64>> {
    let limits = match (flag, &file.limits) {
        (Some(v), _) => v.to_vec(),
        (None, Some(v)) => v.clone(),
        (None, None) => {
            let mut v = DEFAULT_LIMITS.to_vec();
            v.sort_by(f64::total_cmp);
            v
        }
    };
    if limits.is_empty() {
        return Err(Error::Config("no integration limits given".into()));
    }
    if let Some(l) = limits.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::Config(format!("integration limit {l} outside (0, 1]")));
    }
    Ok(limits)
}

/// Prints the fully materialized configuration of a command to stderr.
pub fn banner(command: &str, value: &impl Serialize) {
    let json = serde_json::to_string(value).expect("config serializes");
    eprintln!("pinpoint {command} effective config: {json}");
}
