//! Run configuration: one TOML document with `[train]`, `[data]` and
//! `[model]` sections.

use std::path::{Path, PathBuf};

use avtca_core::data::SyntheticSpec;
use avtca_core::{Hyper, ModelConfig, VariantId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// The annotated configuration used when no `--config` is given.
pub const DEFAULT_TOML: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of IT-1, IT-4, CT-1, CT-4, FULL.
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Seeds weight initialization, dropout and the batch shuffle.
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = Hyper::default();
        Self { batch_size: 8, epochs: 30, seed: 0, lr: h.lr, weight_decay: h.weight_decay, beta1: h.beta1, beta2: h.beta2, eps: h.eps }
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Dataset location and the synthetic generator settings. Class count and
/// extents come from the model section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub per_class: usize,
    pub noise: f64,
    /// Seeds generation and the train/val assignment.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data"), per_class: 200, noise: 0.3, seed: 42 }
    }
}

fn default_variant() -> String {
    VariantId::Full.as_str().to_owned()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            out: default_out(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the built-in default when `None`. Relative paths in
    /// a file are taken relative to the file's directory.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Self::parse(DEFAULT_TOML);
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.out = base.join(&cfg.out);
        cfg.data.dir = base.join(&cfg.data.dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.variant_id()?;
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be >= 1".into()));
        }
        let h = self.train;
        let in_range = h.lr.is_finite()
            && h.lr > 0.0
            && h.weight_decay >= 0.0
            && (0.0..1.0).contains(&h.beta1)
            && (0.0..1.0).contains(&h.beta2)
            && h.eps > 0.0;
        if !in_range {
            return Err(CliError::Config("optimizer settings out of range".into()));
        }
        if self.data.per_class == 0 {
            return Err(CliError::Config("data.per_class must be >= 1".into()));
        }
        self.synthetic().validate()?;
        Ok(())
    }

    pub fn variant_id(&self) -> CliResult<VariantId> {
        Ok(self.variant.parse::<VariantId>()?)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.model.classes,
            per_class: self.data.per_class,
            audio_len: self.model.audio_len,
            frames: self.model.frames,
            noise: self.data.noise,
            seed: self.data.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("a run config always serializes")
    }
}
