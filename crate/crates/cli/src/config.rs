//! Run configuration: one TOML file with `dataset`, `model` and `training`
//! sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selfaug_core::augment::AugmentConfig;
use selfaug_core::datasets::{DataFormat, Modality, SynthConfig};
use selfaug_core::model::{ArchConfig, Variant};
use selfaug_core::training::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Synth,
    TrajectoryJson,
    ImageDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// Dataset root for directory sources.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Split settings for flat directory layouts. The synthetic generator
    /// splits on its own.
    #[serde(default)]
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Synthetic generator parameters (`source = "synth"`).
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Rotated copies per training image (image sources only).
    #[serde(default = "one")]
    pub rotate_copies: usize,
    #[serde(default = "default_step")]
    pub rotate_step_degrees: f64,
    #[serde(default = "default_drop")]
    pub max_drop_fraction: f64,
}

fn one() -> usize {
    1
}
fn default_step() -> f64 {
    6.0
}
fn default_drop() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub image_side: usize,
    /// Expected number of classes; checked against the data when set.
    pub class_count: Option<usize>,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        ModelSection {
            embedding_dim: a.embedding_dim,
            hidden_dim: a.hidden_dim,
            steps: a.steps,
            image_side: a.image_side,
            class_count: None,
            variant: Variant::Proposed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root for prepared data and run directories.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            embedding_dim: self.model.embedding_dim,
            hidden_dim: self.model.hidden_dim,
            steps: self.model.steps,
            image_side: self.model.image_side,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            image_side: self.model.image_side,
            steps: self.model.steps,
            max_drop_fraction: self.dataset.max_drop_fraction,
        }
    }

    pub fn org_modality(&self) -> Modality {
        match self.dataset.source {
            Source::ImageDir => Modality::Image,
            Source::Synth | Source::TrajectoryJson => Modality::TimeSeries,
        }
    }

    pub fn format(&self) -> Option<DataFormat> {
        match self.dataset.source {
            Source::Synth => None,
            Source::TrajectoryJson => Some(DataFormat::TrajectoryJson),
            Source::ImageDir => Some(DataFormat::ImageDir),
        }
    }

    pub fn train_fraction(&self) -> f64 {
        self.dataset.train_fraction.unwrap_or(0.8)
    }

    pub fn synth(&self) -> SynthConfig {
        self.dataset.synth.clone().unwrap_or_default()
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            Source::Synth => {
                for (key, set) in [
                    ("path", d.path.is_some()),
                    ("train_fraction", d.train_fraction.is_some()),
                    ("split_seed", d.split_seed.is_some()),
                ] {
                    if set {
                        return Err(CliError::Config(format!(
                            "dataset.{key}: not used with source \"synth\""
                        )));
                    }
                }
            }
            _ => {
                if d.path.is_none() {
                    return Err(CliError::Config(
                        "dataset.path: required for directory sources".into(),
                    ));
                }
                if d.synth.is_some() {
                    return Err(CliError::Config(
                        "dataset.synth: only valid with source \"synth\"".into(),
                    ));
                }
            }
        }
        if let Some(f) = d.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!(
                    "dataset.train_fraction: must be in (0, 1), got {f}"
                )));
            }
        }
        if d.rotate_copies < 1 {
            return Err(CliError::Config(
                "dataset.rotate_copies: must be at least 1".into(),
            ));
        }
        if d.rotate_copies > 1 && d.source != Source::ImageDir {
            return Err(CliError::Config(
                "dataset.rotate_copies: rotation applies to image sources only".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.max_drop_fraction) {
            return Err(CliError::Config(
                "dataset.max_drop_fraction: must be in [0, 1]".into(),
            ));
        }
        self.arch()
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.training
            .validate()
            .map_err(|e| CliError::Config(format!("training: {e}")))?;
        Ok(())
    }

    /// Hash of the sections that determine the prepared dataset.
    pub fn data_hash(&self) -> String {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "synth": self.synth(),
            "steps": self.model.steps,
            "image_side": self.model.image_side,
        });
        short_hash(&key)
    }

    /// Hash of the whole configuration.
    pub fn run_hash(&self) -> String {
        short_hash(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.output_dir
            .join(format!("prepared-{}", self.data_hash()))
    }
}

fn short_hash(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    hex::encode(digest)[..12].to_string()
}

/// Parses a configuration, reporting the offending field path on schema
/// errors. Relative paths are resolved against the file's directory.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner().message()))
    })?;
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    if let Some(p) = &cfg.dataset.path {
        if p.is_relative() {
            cfg.dataset.path = Some(base.join(p));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}
