//! TOML configuration shared by the CLI and the service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cv::DEFAULT_FOLDS;
use crate::data::{AugmentationPolicy, DatasetParams};
use crate::error::{Error, Result};
use crate::explain::{NullKind, DEFAULT_RESAMPLES};
use crate::nn::ClassifierConfig;
use crate::train::TrainConfig;
use crate::uncertainty::DEFAULT_PASSES;

/// Environment variable naming the configuration file.
pub const CONFIG_ENV: &str = "POCUS_CONFIG";

pub const DEFAULT_UPLOAD_LIMIT: usize = 50 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub cache_dir: PathBuf,
    pub target_hz: f64,
    pub max_frames: usize,
    pub include_uninformative: bool,
}

impl DataSection {
    pub fn params(&self) -> DatasetParams {
        DatasetParams {
            target_hz: self.target_hz,
            max_frames: self.max_frames,
            include_uninformative: self.include_uninformative,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetParams::default();
        DataSection {
            manifest: PathBuf::from("manifest.csv"),
            cache_dir: PathBuf::from("cache"),
            target_hz: d.target_hz,
            max_frames: d.max_frames,
            include_uninformative: d.include_uninformative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub folds: usize,
    pub seed: u64,
    pub path: PathBuf,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            folds: DEFAULT_FOLDS,
            seed: 0,
            path: PathBuf::from("splits.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub resamples: usize,
    pub null: NullKind,
    pub seed: u64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            resamples: DEFAULT_RESAMPLES,
            null: NullKind::Permutation,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub passes: usize,
    pub seed: u64,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            passes: DEFAULT_PASSES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    /// Average all fold checkpoints; otherwise serve fold 0 only.
    pub ensemble: bool,
    pub upload_limit_bytes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            ensemble: true,
            upload_limit_bytes: DEFAULT_UPLOAD_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub split: SplitSection,
    pub augment: AugmentationPolicy,
    pub train: TrainConfig,
    pub model: ClassifierConfig,
    pub checkpoint_dir: PathBuf,
    pub explain: ExplainSection,
    pub uncertainty: UncertaintySection,
    pub service: ServiceSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Explicit path, else `POCUS_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.folds < 2 {
            return Err(Error::Config(format!("split.folds must be at least 2, got {}", self.split.folds)));
        }
        if self.uncertainty.passes < 2 {
            return Err(Error::Config("uncertainty.passes must be at least 2".into()));
        }
        if self.explain.resamples == 0 {
            return Err(Error::Config("explain.resamples must be positive".into()));
        }
        if self.service.upload_limit_bytes == 0 {
            return Err(Error::Config("service.upload_limit_bytes must be positive".into()));
        }
        self.augment.validate()?;
        self.train.validate()?;
        self.model.validate()
    }
}
