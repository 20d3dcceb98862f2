//! Run configuration: JSON file sections merged with command line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::FilterKind;
use crate::model::ModelConfig;
use crate::noise::NoiseSpec;
use crate::seed;
use crate::train::TrainConfig;

pub const OUT_ENV: &str = "DESPECKLE_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Folder of clean images (synthesized mode).
    pub clean_dir: Option<PathBuf>,
    /// Folder of noisy observations; takes precedence over `clean_dir`.
    pub noisy_dir: Option<PathBuf>,
    /// Generate this many procedural shape images instead of reading files.
    pub shapes: Option<usize>,
    pub resolution: usize,
    pub split_ratio: f64,
    pub split_contiguous: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            clean_dir: None,
            noisy_dir: None,
            shapes: None,
            resolution: 256,
            split_ratio: 0.8,
            split_contiguous: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub baselines: Vec<FilterKind>,
    pub window: usize,
    pub write_images: bool,
    pub sweep_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            baselines: vec![FilterKind::Lee, FilterKind::Median, FilterKind::Gaussian],
            window: 5,
            write_images: true,
            sweep_sizes: vec![15, 30, 60, 125, 250, 500],
        }
    }
}

/// Fully resolved settings for one subcommand invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub data: DataConfig,
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}


impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills derived fields and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.out.is_none() {
            self.out = Some(
                std::env::var_os(OUT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            );
        }
        self.train.seed = self.train_seed();
        crate::data::check_resolution(self.data.resolution).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.data.split_ratio)));
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.window < 3 || self.eval.window.is_multiple_of(2) {
            return Err(Error::Config(format!("eval window must be odd and >= 3, got {}", self.eval.window)));
        }
        Ok(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, "split", &[])
    }

    pub fn synth_seed(&self) -> u64 {
        seed::derive(self.seed, "synth", &[])
    }

    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train", &[])
    }

    pub fn eval_seed(&self) -> u64 {
        seed::derive(self.seed, "eval", &[])
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
