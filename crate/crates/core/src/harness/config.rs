use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::SacConfig;
use crate::baselines::{VariantKind, VariantSpec};
use crate::envs::{RandomizationRange, Tier};
use crate::error::{HibError, Result};
use crate::hib::HibConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighDimConfig {
    pub d_p: usize,
    pub sigma: f64,
}

impl Default for HighDimConfig {
    fn default() -> Self {
        Self { d_p: 191, sigma: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub episode_len: usize,
    /// History window length.
    pub k: usize,
    /// Angular velocity clip; `None` disables it.
    pub max_speed: Option<f64>,
    pub train_tier: Tier,
    pub range: RandomizationRange,
    pub highdim: Option<HighDimConfig>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { episode_len: 200, k: 50, max_speed: Some(8.0), train_tier: Tier::Ordinary, range: RandomizationRange::default(), highdim: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub metrics_interval: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { env_steps: 50_000, eval_interval: 10_000, eval_episodes: 20, metrics_interval: 100 }
    }
}

/// Everything that determines a run, together with `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: VariantSpec,
    pub env: EnvConfig,
    pub hib: HibConfig,
    pub sac: SacConfig,
    pub budget: Budget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: VariantSpec::default(),
            env: EnvConfig::default(),
            hib: HibConfig::default(),
            sac: SacConfig::default(),
            budget: Budget::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HibError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HibError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded, first 16 digits.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.hib.validate()?;
        self.sac.validate()?;
        self.env.range.validate()?;
        if self.env.k == 0 || self.env.episode_len == 0 {
            return Err(HibError::Config("env.k and env.episode_len must be positive".into()));
        }
        if let Some(s) = self.env.max_speed {
            if !(s > 0.0) {
                return Err(HibError::Config(format!("env.max_speed {s} must be positive")));
            }
        }
        if self.budget.eval_episodes == 0 || self.budget.eval_interval == 0 || self.budget.metrics_interval == 0 {
            return Err(HibError::Config("budget intervals and eval_episodes must be positive".into()));
        }
        Ok(())
    }

    /// The same base configuration with a different variant; every other
    /// field is shared.
    pub fn with_variant(&self, kind: VariantKind) -> Self {
        let mut c = self.clone();
        c.variant.kind = kind;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}-{}", self.variant.kind, self.seed, self.hash())
    }
}
