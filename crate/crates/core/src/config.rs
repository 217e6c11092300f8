//! Run configuration files (TOML). Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchConfig;
use crate::bound::BoundConfig;
use crate::geometry::DatasetSpec;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetSpec>,
    /// Large sample standing in for the data law in bound estimates.
    pub reference: Option<DatasetSpec>,
    pub architecture: Option<ArchConfig>,
    pub train: Option<TrainConfig>,
    pub bound: Option<BoundConfig>,
    pub sweep: Option<SweepSection>,
    pub sierpinski: Option<SierpinskiSection>,
    pub appendix_c: Option<AppendixCSection>,
    pub attractor: Option<AttractorSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub caps: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { caps: vec![0.3, 0.5, 0.7, 0.9] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SierpinskiSection {
    pub iters: usize,
    pub chaos_points: usize,
    pub burn_in: usize,
}

impl Default for SierpinskiSection {
    fn default() -> Self {
        Self { iters: 8, chaos_points: 100_000, burn_in: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixCSection {
    pub p: Vec<f64>,
    pub steps: usize,
    pub lyapunov_steps: usize,
}

impl Default for AppendixCSection {
    fn default() -> Self {
        Self { p: vec![0.55, 0.6, 0.65], steps: 80, lyapunov_steps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttractorSection {
    pub checkpoint: Option<PathBuf>,
    pub count: usize,
    pub burn_in: usize,
}

impl Default for AttractorSection {
    fn default() -> Self {
        Self { checkpoint: None, count: 4096, burn_in: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub plot: bool,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(s, Path::new("test.toml"))
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
[dataset]
kind = "two_moons"
n = 2048
noise = 0.1
radius = 2.0
seed = 1

[architecture]
kind = "moe"
dim = 2
experts = 8
hidden = [32]
cap = 0.9

[train]
epochs = 10
lr = 0.001

[bound]
mc_batches = 2

[sweep]
caps = [0.5]
"#;
        let c = parse(text).unwrap();
        assert_eq!(c.train.as_ref().unwrap().epochs, 10);
        assert_eq!(c.train.as_ref().unwrap().batch_size, 256);
        assert_eq!(c.bound.as_ref().unwrap().mc_batch_size, 512);
        assert_eq!(c.sweep.unwrap().caps, vec![0.5]);
        assert!(matches!(c.architecture, Some(ArchConfig::Moe(_))));
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        for bad in ["[train]\nepochz = 3\n", "[bound]\nmc_batch = 3\n", "[trian]\nepochs = 3\n", "[sweep]\ncap = [0.5]\n"] {
            let err = parse(bad).unwrap_err().to_string();
            assert!(err.contains("test.toml") && err.contains("unknown"), "{err}");
        }
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }
}
