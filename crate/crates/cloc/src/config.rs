//! Flat `key = value` configuration covering every model and training
//! field. The same text format is embedded in checkpoints so a saved model
//! carries its own configuration.

use crate::encoders::ModelConfig;
use crate::model::RegionExtractor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Optimization hyper-parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_regions: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub filter_threshold: f64,
    pub region_extractor: RegionExtractor,
}

impl TrainConfig {
    /// Desk-scale defaults. The warmup keeps the reference schedule's
    /// warmup fraction (2k of 439k steps) at 3000 total steps.
    pub fn desk_default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_regions: 4,
            peak_lr: 5e-4,
            warmup_steps: 14,
            total_steps: 3000,
            weight_decay: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            seed: 0,
            filter_threshold: 0.9,
            region_extractor: RegionExtractor::Prompter,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_regions == 0 {
            return Err(ConfigError::Invalid("max_regions must be >= 1".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(ConfigError::Invalid(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(ConfigError::Invalid("betas must lie in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::Invalid("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.filter_threshold) {
            return Err(ConfigError::Invalid(
                "filter_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Full run configuration: architecture plus optimization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::desk_default(),
            train: TrainConfig::desk_default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate()
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let line = 0;
        let bad = |key: &str, message: String| ConfigError::BadValue {
            line,
            key: key.to_owned(),
            message,
        };
        macro_rules! parse {
            ($field:expr, $key:expr) => {
                $field = value.parse().map_err(|e| bad($key, format!("{e}")))?
            };
        }
        match key {
            "image_size" => parse!(self.model.image_size, key),
            "patch_size" => parse!(self.model.patch_size, key),
            "d_v" => parse!(self.model.d_v, key),
            "n_layers" => parse!(self.model.n_layers, key),
            "n_heads" => parse!(self.model.n_heads, key),
            "d_e" => parse!(self.model.d_e, key),
            "vocab_size" => parse!(self.model.vocab_size, key),
            "max_text_len" => parse!(self.model.max_text_len, key),
            "init_temperature" => parse!(self.model.init_temperature, key),
            "batch_size" => parse!(self.train.batch_size, key),
            "max_regions" => parse!(self.train.max_regions, key),
            "peak_lr" => parse!(self.train.peak_lr, key),
            "warmup_steps" => parse!(self.train.warmup_steps, key),
            "total_steps" => parse!(self.train.total_steps, key),
            "weight_decay" => parse!(self.train.weight_decay, key),
            "adam_beta1" => parse!(self.train.adam_beta1, key),
            "adam_beta2" => parse!(self.train.adam_beta2, key),
            "adam_eps" => parse!(self.train.adam_eps, key),
            "seed" => parse!(self.train.seed, key),
            "filter_threshold" => parse!(self.train.filter_threshold, key),
            "region_extractor" => parse!(self.train.region_extractor, key),
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_owned(),
                })
            }
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults. Blank lines and
    /// `#` comments are skipped; later lines win.
    pub fn from_text(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: line_no,
                text: raw.to_owned(),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: line_no, key },
                ConfigError::BadValue { key, message, .. } => ConfigError::BadValue {
                    line: line_no,
                    key,
                    message,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        format!(
            "image_size = {}\npatch_size = {}\nd_v = {}\nn_layers = {}\nn_heads = {}\nd_e = {}\nvocab_size = {}\nmax_text_len = {}\ninit_temperature = {}\nbatch_size = {}\nmax_regions = {}\npeak_lr = {}\nwarmup_steps = {}\ntotal_steps = {}\nweight_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\nseed = {}\nfilter_threshold = {}\nregion_extractor = {}\n",
            m.image_size,
            m.patch_size,
            m.d_v,
            m.n_layers,
            m.n_heads,
            m.d_e,
            m.vocab_size,
            m.max_text_len,
            m.init_temperature,
            t.batch_size,
            t.max_regions,
            t.peak_lr,
            t.warmup_steps,
            t.total_steps,
            t.weight_decay,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            t.seed,
            t.filter_threshold,
            t.region_extractor,
        )
    }

    /// Short hex digest of the canonical form, for report provenance.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
