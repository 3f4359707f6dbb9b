//! Run configuration: one structured text file with sectioned keys, an
//! environment seed override hook, validation, and a content hash that is
//! embedded in every output artifact.

use crate::cpo::CpoConfig;
use crate::high_policy::HighConfig;
use crate::low_policy::ValueFitConfig;
use crate::reward::RewardConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Top-level run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub scenario: String,
    pub out_dir: String,
    pub episodes: usize,
    pub high_checkpoint: String,
    pub low_checkpoint: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 7,
            scenario: String::new(),
            out_dir: "out".into(),
            episodes: 100,
            high_checkpoint: String::new(),
            low_checkpoint: String::new(),
        }
    }
}

/// Reward shaping terms shared by both levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSection {
    pub r_arrive: f64,
    pub r_step: f64,
    pub r_out: f64,
    pub mu: f64,
    pub d_limit: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        let c = RewardConfig::default();
        RewardSection {
            r_arrive: c.r_arrive_val,
            r_step: c.r_step_val,
            r_out: c.r_out_val,
            mu: c.mu,
            d_limit: c.d_limit,
        }
    }
}

/// Sub-goal value-learning settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnSection {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync: u64,
    pub her_k: usize,
    pub episodes: usize,
    pub warmup: usize,
    /// Optimize once per this many decisions; 1 trains on every decision.
    pub train_every: usize,
    /// Optimizer steps taken per training event.
    pub train_repeats: usize,
    pub checkpoint_every: usize,
}

impl Default for DqnSection {
    fn default() -> Self {
        let c = HighConfig::default();
        DqnSection {
            gamma: c.gamma,
            lr: c.lr,
            batch_size: c.batch_size,
            buffer_capacity: c.buffer_capacity,
            eps_start: c.eps_start,
            eps_end: c.eps_end,
            eps_decay_steps: c.eps_decay_steps,
            target_sync: c.target_sync,
            her_k: c.her_k,
            episodes: 300,
            warmup: 500,
            train_every: 1,
            train_repeats: 1,
            checkpoint_every: 50,
        }
    }
}

/// Constrained motion-policy training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CpoSection {
    pub delta: f64,
    pub d_cost: f64,
    pub cg_iters: usize,
    pub backtrack_steps: usize,
    pub backtrack_coeff: f64,
    pub gamma: f64,
    pub lam: f64,
    pub steps_per_update: usize,
    pub updates: usize,
    pub log_std_init: f64,
    pub value_lr: f64,
    pub value_iters: usize,
    pub value_minibatch: usize,
    pub checkpoint_every: usize,
}

impl Default for CpoSection {
    fn default() -> Self {
        let c = CpoConfig::default();
        CpoSection {
            delta: c.delta,
            d_cost: c.d_cost,
            cg_iters: c.cg_iters,
            backtrack_steps: c.backtrack_steps,
            backtrack_coeff: c.backtrack_coeff,
            gamma: c.gamma,
            lam: c.lam,
            steps_per_update: 1024,
            updates: 60,
            log_std_init: -0.5,
            value_lr: 1e-3,
            value_iters: 40,
            value_minibatch: 256,
            checkpoint_every: 10,
        }
    }
}

/// Crowd simulation settings.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SfmSection {
    /// When set, every pedestrian's desired speed is replaced.
    pub desired_speed_override: Option<f64>,
}

/// Deployment-time command filter settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetySection {
    pub enabled: bool,
    pub horizon: f64,
}

impl Default for SafetySection {
    fn default() -> Self {
        SafetySection {
            enabled: true,
            horizon: 1.0,
        }
    }
}

/// Full run configuration assembled from the sectioned text file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub reward: RewardSection,
    pub dqn: DqnSection,
    pub cpo: CpoSection,
    pub sfm: SfmSection,
    pub safety: SafetySection,
}

impl RunConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            r_arrive_val: self.reward.r_arrive,
            r_step_val: self.reward.r_step,
            r_out_val: self.reward.r_out,
            mu: self.reward.mu,
            d_limit: self.reward.d_limit,
        }
    }

    pub fn high_config(&self) -> HighConfig {
        HighConfig {
            gamma: self.dqn.gamma,
            lr: self.dqn.lr,
            batch_size: self.dqn.batch_size,
            buffer_capacity: self.dqn.buffer_capacity,
            eps_start: self.dqn.eps_start,
            eps_end: self.dqn.eps_end,
            eps_decay_steps: self.dqn.eps_decay_steps,
            target_sync: self.dqn.target_sync,
            her_k: self.dqn.her_k,
        }
    }

    pub fn cpo_config(&self) -> CpoConfig {
        CpoConfig {
            delta: self.cpo.delta,
            d_cost: self.cpo.d_cost,
            cg_iters: self.cpo.cg_iters,
            backtrack_steps: self.cpo.backtrack_steps,
            backtrack_coeff: self.cpo.backtrack_coeff,
            gamma: self.cpo.gamma,
            lam: self.cpo.lam,
            ..CpoConfig::default()
        }
    }

    pub fn value_fit_config(&self) -> ValueFitConfig {
        ValueFitConfig {
            lr: self.cpo.value_lr,
            iters: self.cpo.value_iters,
            minibatch: self.cpo.value_minibatch,
        }
    }

    /// Hex digest of the resolved configuration, after any seed override.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serialization");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Sanity checks shared by every mode.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.reward.d_limit <= 0.0 {
            return bad("d_limit must be positive");
        }
        if !(0.0..1.0).contains(&self.dqn.gamma) {
            return bad("dqn gamma must lie in [0, 1)");
        }
        if self.dqn.batch_size == 0 || self.dqn.batch_size > self.dqn.buffer_capacity {
            return bad("dqn batch size must be positive and fit the buffer");
        }
        if self.cpo.delta <= 0.0 || self.cpo.d_cost < 0.0 {
            return bad("cpo trust region and cost limit must be non-negative");
        }
        if self.safety.horizon <= 0.0 {
            return bad("safety horizon must be positive");
        }
        if let Some(v) = self.sfm.desired_speed_override {
            if v < 0.0 {
                return bad("pedestrian speed override must be non-negative");
            }
        }
        Ok(())
    }

    /// Checks that only matter when a scenario will actually be loaded.
    pub fn validate_scenario_path(&self) -> Result<(), ConfigError> {
        if self.run.scenario.is_empty() {
            return Err(ConfigError::Invalid("scenario path not set".into()));
        }
        if !Path::new(&self.run.scenario).exists() {
            return Err(ConfigError::Invalid(format!(
                "scenario file not found: {}",
                self.run.scenario
            )));
        }
        Ok(())
    }
}

/// Parse configuration text; unknown keys are rejected by structure.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file and apply an optional seed override (the command
/// line reads it from the NAVSIM_SEED environment variable).
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = seed_override {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.dqn.batch_size, 64);
        assert!((cfg.cpo.d_cost - 0.025).abs() < 1e-12);
        assert!(cfg.safety.enabled);
    }

    #[test]
    fn sectioned_keys_override_defaults() {
        let text = "
[run]
seed = 42
episodes = 10

[dqn]
gamma = 0.95

[sfm]
desired_speed_override = 1.2
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert_eq!(cfg.run.episodes, 10);
        assert!((cfg.dqn.gamma - 0.95).abs() < 1e-12);
        assert_eq!(cfg.sfm.desired_speed_override, Some(1.2));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse_config("[dqn]\ngamma = 1.5\n").is_err());
        assert!(parse_config("[reward]\nd_limit = -1.0\n").is_err());
        assert!(parse_config("[safety]\nhorizon = 0.0\n").is_err());
        assert!(parse_config("not toml at all [").is_err());
    }

    #[test]
    fn hash_tracks_content_and_seed_override() {
        let a = parse_config("[run]\nseed = 1\n").unwrap();
        let b = parse_config("[run]\nseed = 2\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        let a2 = parse_config("[run]\nseed = 1\n").unwrap();
        assert_eq!(a.hash(), a2.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn seed_override_applies_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[run]\nseed = 5\n").unwrap();
        let cfg = load_config(&p, None).unwrap();
        assert_eq!(cfg.run.seed, 5);
        let cfg = load_config(&p, Some(99)).unwrap();
        assert_eq!(cfg.run.seed, 99);
    }

    #[test]
    fn section_configs_map_through() {
        let cfg = parse_config("[reward]\nmu = 2.0\n[cpo]\nlam = 0.9\n").unwrap();
        assert!((cfg.reward_config().mu - 2.0).abs() < 1e-12);
        assert!((cfg.cpo_config().lam - 0.9).abs() < 1e-12);
        assert_eq!(cfg.high_config().batch_size, 64);
        assert_eq!(cfg.value_fit_config().iters, 40);
    }
}
