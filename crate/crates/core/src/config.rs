//! Flat key=value run configuration.
//!
//! Precedence is defaults < config file < command-line flags; the merged
//! result is printed in full at startup so runs are reproducible from their
//! logs. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::interp::InterpMethod;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Which architecture preset to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Tiny,
    Production,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(ModelKind::Tiny),
            "production" => Ok(ModelKind::Production),
            other => Err(Error::Config(format!(
                "model: expected 'tiny' or 'production', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Tiny => write!(f, "tiny"),
            ModelKind::Production => write!(f, "production"),
        }
    }
}

/// Merged model + training + path settings for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub deterministic: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub leaky_slope: f64,
    pub skip_interpolation: InterpMethod,
    pub tile_size: usize,
    pub scale_factor: usize,
    pub bins: usize,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Tiny,
            seed: 0,
            deterministic: true,
            learning_rate: 0.001,
            batch_size: 4,
            max_epochs: 100,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            leaky_slope: 0.2,
            skip_interpolation: InterpMethod::Bicubic,
            tile_size: 400,
            scale_factor: 16,
            bins: 50,
            manifest: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Applies one key=value setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "model" => self.model = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "plateau_threshold" => self.plateau_threshold = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "skip_interpolation" => self.skip_interpolation = value.parse()?,
            "tile_size" => self.tile_size = parse(key, value)?,
            "scale_factor" => self.scale_factor = parse(key, value)?,
            "bins" => self.bins = parse(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Loads a `key = value` file with `#` comments over the defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.model {
            ModelKind::Tiny => ModelConfig::tiny(self.seed),
            ModelKind::Production => ModelConfig::production(self.seed),
        };
        cfg.leaky_slope = self.leaky_slope;
        cfg.skip_interpolation = self.skip_interpolation;
        cfg.validate()?;
        if cfg.scale_factor != self.scale_factor {
            return Err(Error::Config(format!(
                "scale_factor: {} is not supported by the architecture (expected {})",
                self.scale_factor, cfg.scale_factor
            )));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            plateau_threshold: self.plateau_threshold,
            min_lr: self.min_lr,
            seed: self.seed,
            deterministic: self.deterministic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The full effective configuration, one key per line.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|v| v.display().to_string())
                .unwrap_or_else(|| "(unset)".into())
        };
        format!(
            "model = {}\nseed = {}\ndeterministic = {}\nlearning_rate = {}\nbatch_size = {}\n\
             max_epochs = {}\nplateau_patience = {}\nplateau_factor = {}\nplateau_threshold = {}\n\
             min_lr = {}\nleaky_slope = {}\nskip_interpolation = {}\ntile_size = {}\n\
             scale_factor = {}\nbins = {}\nmanifest = {}\nout_dir = {}\ncheckpoint = {}",
            self.model,
            self.seed,
            self.deterministic,
            self.learning_rate,
            self.batch_size,
            self.max_epochs,
            self.plateau_patience,
            self.plateau_factor,
            self.plateau_threshold,
            self.min_lr,
            self.leaky_slope,
            self.skip_interpolation,
            self.tile_size,
            self.scale_factor,
            self.bins,
            path(&self.manifest),
            path(&self.out_dir),
            path(&self.checkpoint),
        )
    }
}
