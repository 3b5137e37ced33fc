//! Optional JSON config file. Keys mirror the long flag names with
//! underscores; a flag given on the command line wins over the file, and the
//! file wins over built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // ingest
    pub k: Option<usize>,
    pub min_annotators: Option<usize>,
    pub merge_duplicates: Option<bool>,
    pub summary_bins: Option<usize>,
    // synth
    pub n_items: Option<usize>,
    pub annotators: Option<String>,
    pub mixture: Option<String>,
    pub noise_temp: Option<f64>,
    pub feature_dim: Option<usize>,
    pub seed: Option<u64>,
    // model and training
    pub loss: Option<String>,
    pub losses: Option<Vec<String>>,
    pub lambda_mean: Option<f64>,
    pub emd_power: Option<u8>,
    pub seeds: Option<Vec<u64>>,
    pub splits: Option<Vec<f64>>,
    pub patience: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub optimizer: Option<String>,
    pub dataset_name: Option<String>,
    // analysis
    pub var_bins: Option<usize>,
    pub opp_bins: Option<usize>,
    pub target: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| disagree_core::Error::InvalidConfig(format!("{}: {e}", path.display())).into())
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
