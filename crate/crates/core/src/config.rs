//! Run configuration file.
//!
//! ```toml
//! [data]
//! source = "mnist"          # or "synthetic"
//! mnist_dir = "data/mnist"
//! subsample = 10000         # 0 keeps every sample
//! noise_channels = 2
//! seed = 0
//!
//! [data.splits]
//! holdout_fraction = 0.3
//! validation_fraction = 0.2
//!
//! [network]                 # backbone, see NetworkConfig
//! [train]                   # see TrainConfig
//! [model]
//! kind = "dcmix"            # dcmix | attention | plain
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

/// Where prepared datasets are read from when no directory is given.
pub const DATA_DIR_ENV: &str = "DCMIX_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub mnist_dir: PathBuf,
    pub subsample: usize,
    /// Uniform noise channels appended to MNIST digits.
    pub noise_channels: usize,
    /// Seeds subsampling, noise and the split.
    pub seed: u64,
    pub splits: SplitSection,
    pub synthetic: SynthSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub holdout_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { holdout_fraction: s.holdout_fraction, validation_fraction: s.validation_fraction }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            subsample: 10_000,
            noise_channels: 2,
            seed: 0,
            splits: SplitSection::default(),
            synthetic: SynthSpec::default(),
        }
    }
}

impl DataSection {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            holdout_fraction: self.splits.holdout_fraction,
            validation_fraction: self.splits.validation_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Dcmix }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub model: ModelSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.split_spec().validate()?;
        self.train.validate()?;
        if self.data.source == DataSource::Mnist && self.data.noise_channels == 0 {
            return Err(Error::Config("data.noise_channels must be at least 1 for mnist".into()));
        }
        let mut net = self.network.clone();
        net.input_channels = 1;
        net.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// The resolved configuration as JSON, for echoing into outputs.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

/// `explicit`, else the environment default, else `fallback`.
pub fn data_dir(explicit: Option<&Path>, fallback: &Path) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}
