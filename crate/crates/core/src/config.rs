//! Sectioned TOML run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DatasetSplits, SyntheticSpec};
use crate::error::DataError;
use crate::loss::LossSpec;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSpec,
    pub data: DataConfig,
    pub output: OutputConfig,
}

/// Exactly one source: a dataset file, a CSV manifest, or an inline
/// synthetic spec generated on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub split: [f64; 3],
    /// Explicit `[train, val, test]` sizes; overrides `split`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_sizes: Option<[usize; 3]>,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, manifest: None, synthetic: None, split: [0.7, 0.1, 0.2], split_sizes: None, split_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Reads and parses a TOML file; parse errors carry line and column.
pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })
}

impl RunConfig {
    /// Loads a config and makes its relative paths relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.manifest.as_mut() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| invalid(e.to_string()))?;
        let sources = [self.data.path.is_some(), self.data.manifest.is_some(), self.data.synthetic.is_some()];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(invalid("give at most one of data.path, data.manifest, data.synthetic".into()));
        }
        if let Some(spec) = &self.data.synthetic {
            spec.validate().map_err(|e| invalid(e.to_string()))?;
            if spec.tasks != self.model.heads.tasks {
                return Err(invalid(format!(
                    "data.synthetic.tasks {:?} differ from model.heads.tasks {:?}",
                    spec.tasks, self.model.heads.tasks
                )));
            }
        }
        Ok(())
    }

    /// The training settings with the loss section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { loss: self.loss, ..self.train.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load_data(&self) -> Result<Dataset, DataError> {
        match (&self.data.path, &self.data.manifest, &self.data.synthetic) {
            (Some(p), _, _) => data::load_dataset(p),
            (_, Some(m), _) => data::load_manifest(m),
            (_, _, Some(spec)) => data::generate(spec),
            _ => Err(DataError::Invalid("no data source configured".into())),
        }
    }

    pub fn splits(&self, n: usize) -> Result<DatasetSplits, DataError> {
        match self.data.split_sizes {
            Some(sizes) => data::split_sizes(n, sizes, self.data.split_seed),
            None => data::split(n, self.data.split, self.data.split_seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig { data: DataConfig { synthetic: Some(SyntheticSpec::default()), ..Default::default() }, ..Default::default() };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochs = 3\nspeed = 9").is_err());
        assert!(toml::from_str::<RunConfig>("[bogus]\nx = 1").is_err());
        let ok: RunConfig = toml::from_str("[loss]\nmode = \"equal\"\n[model.encoder]\nsharing = \"individual\"").unwrap();
        assert_eq!(ok.loss, LossSpec::Equal);
    }

    #[test]
    fn loss_factor_checked() {
        let cfg: RunConfig = toml::from_str("[loss]\nmode = \"biased\"\nw = 0.7").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }
}
