//! Run configuration, loaded from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcp::{Ablation, McpConfig};
use crate::morphology::{ControlRanges, MorphologyRanges};
use crate::observation::NoiseConfig;
use crate::policy::{PolicyConfig, PpoConfig};
use crate::rewards::RewardConfig;
use crate::sim::SimConfig;
use crate::terrain::{TerrainFamily, TerrainSchedule, MAX_LEVEL, MIN_LEVEL};

/// Recovery success test applied to an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessCriteria {
    /// The stable window must be complete by this time, s.
    pub deadline: f64,
    /// Length of the stable window, s.
    pub window: f64,
    /// Bound on `|g_z + 1|`.
    pub gravity_tolerance: f64,
    /// Minimum base height as a fraction of the nominal standing height.
    pub height_fraction: f64,
    /// Bound on `‖q − q_stand‖∞`, rad.
    pub posture_tolerance: f64,
    /// Horizontal displacement from the spawn point must stay below this, m.
    pub max_displacement: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            deadline: 5.0,
            window: 0.5,
            gravity_tolerance: 0.1,
            height_fraction: 0.6,
            posture_tolerance: 0.5,
            max_displacement: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: usize,
    pub episodes: usize,
    pub families: Vec<TerrainFamily>,
    pub levels: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 4,
            episodes: 256,
            families: TerrainFamily::EVAL.to_vec(),
            levels: (MIN_LEVEL..=MAX_LEVEL).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_envs: usize,
    pub episode_steps: usize,
    pub control_dt: f64,
    /// Control steps collected per env per iteration; episodes carry over.
    pub horizon: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub max_nan_recoveries: usize,
    /// Terrain families assigned round-robin to the environments.
    pub families: Vec<TerrainFamily>,
    pub initial_level: u32,
    pub curriculum: bool,
    pub randomize_morphology: bool,
    pub randomize_control: bool,
    pub ablation: Ablation,
    pub sim: SimConfig,
    pub morphology: MorphologyRanges,
    pub control: ControlRanges,
    pub terrain: TerrainSchedule,
    pub noise: NoiseConfig,
    pub rewards: RewardConfig,
    pub success: SuccessCriteria,
    pub mcp: McpConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_envs: 256,
            episode_steps: 350,
            control_dt: 0.02,
            horizon: 24,
            iterations: 1500,
            checkpoint_every: 100,
            max_nan_recoveries: 3,
            families: TerrainFamily::EVAL.to_vec(),
            initial_level: MIN_LEVEL,
            curriculum: true,
            randomize_morphology: true,
            randomize_control: true,
            ablation: Ablation::default(),
            sim: SimConfig::default(),
            morphology: MorphologyRanges::default(),
            control: ControlRanges::default(),
            terrain: TerrainSchedule::default(),
            noise: NoiseConfig::default(),
            rewards: RewardConfig::default(),
            success: SuccessCriteria::default(),
            mcp: McpConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_envs == 0 {
            return fail("num_envs must be at least 1");
        }
        if self.episode_steps == 0 || self.horizon == 0 {
            return fail("episode_steps and horizon must be positive");
        }
        if !(self.control_dt > 0.0) || !(self.sim.dt_physics > 0.0) {
            return fail("time steps must be positive");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive");
        }
        if self.families.is_empty() {
            return fail("at least one terrain family is required");
        }
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&self.initial_level) {
            return fail("initial_level must be in 1..=10");
        }
        if self.ppo.minibatches == 0 || self.ppo.minibatches > self.num_envs * self.horizon {
            return fail("ppo.minibatches must be in 1..=num_envs*horizon");
        }
        if self.eval.levels.iter().any(|l| !(MIN_LEVEL..=MAX_LEVEL).contains(l)) {
            return fail("eval.levels must be in 1..=10");
        }
        Ok(())
    }

    pub fn episode_duration(&self) -> f64 {
        self.episode_steps as f64 * self.control_dt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.episode_steps, 350);
        assert_eq!(c.control_dt, 0.02);
        assert!((c.episode_duration() - 7.0).abs() < 1e-12);
        assert_eq!(c.num_envs, 256);
        assert_eq!(c.horizon, 24);
        assert_eq!(c.checkpoint_every, 100);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.ablation.no_col = true;
        c.families = vec![TerrainFamily::Flat, TerrainFamily::Rough];
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("num_envs = 8\n[ppo]\nepochs = 2\n").unwrap();
        assert_eq!(c.num_envs, 8);
        assert_eq!(c.ppo.epochs, 2);
        assert_eq!(c.ppo.gamma, 0.99);
        assert_eq!(c.episode_steps, 350);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml_str("num_env = 8\n").is_err());
        assert!(RunConfig::from_toml_str("[ppo]\nclip = 0.1\n").is_err());
        assert!(RunConfig::from_toml_str("[sim]\nstiffness = 1.0\n").is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::from_toml_str("num_envs = 0\n").is_err());
        assert!(RunConfig::from_toml_str("initial_level = 11\n").is_err());
        assert!(RunConfig::from_toml_str("families = []\n").is_err());
    }
}
