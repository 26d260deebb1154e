//! Run configuration as a TOML document, and its content hash.

use std::path::{Path, PathBuf};

use biasdp::dp::NoisePlacement;
use biasdp::models::{Activation, LossKind};
use biasdp::optim::{Method, OptimizerConfig, Schedule, DEFAULT_NORM_GUARD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output widths come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub loss: LossKind,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            loss: LossKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub method: Method,
    pub learning_rate: Schedule,
    #[serde(default = "zero_lambda")]
    pub lambda: Schedule,
    #[serde(default = "default_guard")]
    pub norm_guard: f64,
    #[serde(default)]
    pub momentum: Option<f64>,
}

fn zero_lambda() -> Schedule {
    Schedule::Constant(0.0)
}

fn default_guard() -> f64 {
    DEFAULT_NORM_GUARD
}

impl OptimConfig {
    pub fn to_core(&self) -> OptimizerConfig {
        OptimizerConfig {
            method: self.method,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            norm_guard: self.norm_guard,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub clip: f64,
    /// Fixed noise multiplier. Excludes `epsilon`.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Target budget; σ is calibrated before training. Excludes `sigma`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub delta: f64,
    #[serde(default)]
    pub noise_placement: NoisePlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Poisson sampling rate.
    pub q: f64,
    #[serde(default = "default_instrument_every")]
    pub instrument_every: u64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Record per-step wall time. Off keeps metrics byte-reproducible.
    #[serde(default)]
    pub timing: bool,
    /// Where metrics go. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub privacy: PrivacySection,
}

fn default_instrument_every() -> u64 {
    10
}

fn default_eval_fraction() -> f64 {
    0.2
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.privacy;
        match (p.sigma, p.epsilon) {
            (Some(_), Some(_)) => return Err(HarnessError::config("give either sigma or epsilon, not both")),
            (None, None) => return Err(HarnessError::config("one of sigma or epsilon is required")),
            (Some(s), None) if !(s >= 0.0) => return Err(HarnessError::config("sigma must be >= 0")),
            (None, Some(e)) if !(e > 0.0) => return Err(HarnessError::config("epsilon must be > 0")),
            _ => {}
        }
        if !(p.clip > 0.0) {
            return Err(HarnessError::config("clip must be > 0"));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(HarnessError::config("delta must lie in (0, 1)"));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(HarnessError::config("q must lie in (0, 1]"));
        }
        if self.epochs == 0 {
            return Err(HarnessError::config("epochs must be >= 1"));
        }
        if self.instrument_every == 0 {
            return Err(HarnessError::config("instrument_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(HarnessError::config("eval_fraction must lie in [0, 1)"));
        }
        self.optimizer.to_core().validate()?;
        Ok(())
    }

    /// JSON with struct fields in declaration order and the output path
    /// removed.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_string(&c).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }
}
