//! Joint PPO and predictor training over parallel environments.
//!
//! Each iteration: rollout → GAE → PPO update (one predictor step after each
//! epoch) → normalizer update → metrics. Episode-level curriculum updates
//! happen as episodes end inside the rollout. All randomness is drawn from
//! streams derived from `(seed, iteration, env)`, and environments are
//! rebuilt at checkpoint boundaries, so a run resumed from a checkpoint
//! repeats the uninterrupted run exactly.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::agent::Agent;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::{rng_for, Env, StepOutcome};
use crate::error::{Error, Result};
use crate::eval::TerminalReason;
use crate::mcp::{McpLossTerms, McpTargets};
use crate::nn::{clip_grad_norm, Adam, Parameters};
use crate::observation::{Normalizer, HISTORY_DIM, LATENT_DIM, OBS_DIM, POLICY_DIM, PRIVILEGED_DIM};
use crate::policy::{gae, normalize_advantages, ppo_update, sample_actions, PpoLosses, RolloutBatch, ACTION_DIM};
use crate::rewards::{NUM_TERMS, TERM_NAMES};
use crate::terrain::{CurriculumState, TerrainFamily};

// Random stream tags.
const INIT: u64 = 1;
const ENV_BUILD: u64 = 2;
const ENV_STEP: u64 = 3;
const ROLLOUT: u64 = 4;
const UPDATE: u64 = 5;

/// Everything collected in one rollout, rows ordered `t · N + env`.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub batch: RolloutBatch,
    /// Normalized histories, for the predictor.
    pub history: Array2<f32>,
    pub mass_target: Array2<f32>,
    pub contact_target: Array2<f32>,
    /// Normalized noise-free next observations.
    pub next_obs: Array2<f32>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Raw rows for the normalizer update.
    pub raw_obs: Vec<f64>,
    pub raw_privileged: Vec<f64>,
    pub episodes: Vec<crate::eval::EpisodeResult>,
    pub faults: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_step_reward: f64,
    pub episodes: usize,
    pub mean_episode_return: f64,
    pub success_rate: f64,
    pub mean_level: f64,
    pub faults: usize,
    pub ppo: PpoLosses,
    pub ppo_epochs: usize,
    pub learning_rate: f64,
    pub mcp: McpLossTerms,
    /// Per-term sums averaged over the episodes that ended this iteration.
    pub term_means: [f64; NUM_TERMS],
}

impl IterationStats {
    pub fn csv_header() -> String {
        let mut h = String::from(
            "iteration,env_steps,mean_step_reward,episodes,mean_episode_return,success_rate,mean_level,faults,\
             surrogate,value_loss,entropy,approx_kl,clip_fraction,ppo_epochs,learning_rate,\
             mcp_mass_mse,mcp_contact_bce,mcp_recon_mse,mcp_kl,mcp_total",
        );
        for n in TERM_NAMES {
            let _ = write!(h, ",ep_{n}");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let p = &self.ppo;
        let m = &self.mcp;
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.mean_step_reward,
            self.episodes,
            self.mean_episode_return,
            self.success_rate,
            self.mean_level,
            self.faults,
            p.surrogate,
            p.value,
            p.entropy,
            p.approx_kl,
            p.clip_fraction,
            self.ppo_epochs,
            self.learning_rate,
            m.mass_mse,
            m.contact_bce,
            m.recon_mse,
            m.kl,
            m.total
        );
        for t in self.term_means {
            let _ = write!(r, ",{t}");
        }
        r
    }

    pub fn is_finite(&self) -> bool {
        let p = &self.ppo;
        [p.surrogate, p.value, p.entropy, p.total, self.mcp.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Appends one CSV row per iteration, writing the header for new files.
pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", IterationStats::csv_header()).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn write(&mut self, s: &IterationStats) -> Result<()> {
        writeln!(self.file, "{}", s.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub agent: Agent,
    pub policy_adam: Adam<f32>,
    pub mcp_adam: Adam<f32>,
    /// Curriculum position of each env; authoritative whenever `envs` is rebuilt.
    pub curricula: Vec<CurriculumState>,
    pub envs: Vec<Env>,
    pub iteration: u64,
    pub env_steps: u64,
    pub nan_recoveries: usize,
    last_good: Checkpoint,
    /// Directory for periodic checkpoint files.
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<MetricsWriter>,
}

fn family_for(cfg: &RunConfig, i: usize) -> TerrainFamily {
    cfg.families[i % cfg.families.len()]
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &[INIT]);
        let agent = Agent::new(&cfg, &mut rng);
        let policy_adam = Adam::new(agent.policy.num_params(), cfg.ppo.learning_rate);
        let mcp_adam = Adam::new(agent.mcp.num_params(), cfg.mcp.learning_rate);
        let curricula = (0..cfg.num_envs)
            .map(|i| CurriculumState::new(family_for(&cfg, i), cfg.initial_level))
            .collect();
        let mut t = Self {
            cfg,
            agent,
            policy_adam,
            mcp_adam,
            curricula,
            envs: Vec::new(),
            iteration: 0,
            env_steps: 0,
            nan_recoveries: 0,
            last_good: Checkpoint::new(),
            checkpoint_dir: None,
            metrics: None,
        };
        t.last_good = t.checkpoint();
        Ok(t)
    }

    /// Rebuilds every environment from its curriculum state with fresh episodes.
    fn rebuild_envs(&mut self) -> Result<()> {
        let (cfg, it) = (&self.cfg, self.iteration);
        self.envs = self
            .curricula
            .par_iter()
            .enumerate()
            .map(|(i, c)| Env::new(cfg, i, c.clone(), rng_for(cfg.seed, &[ENV_BUILD, it, i as u64])))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn at_checkpoint_boundary(&self) -> bool {
        self.iteration % self.cfg.checkpoint_every as u64 == 0
    }

    /// Collects `horizon` steps from every environment with the current agent.
    pub fn rollout(&mut self) -> Result<Rollout> {
        if self.envs.is_empty() || self.at_checkpoint_boundary() {
            self.rebuild_envs()?;
        }
        for (i, env) in self.envs.iter_mut().enumerate() {
            env.reseed(rng_for(self.cfg.seed, &[ENV_STEP, self.iteration, i as u64]));
        }
        let cfg = &self.cfg;
        let agent = &self.agent;
        let n = self.envs.len();
        let horizon = cfg.horizon;
        let rows = n * horizon;
        let mut rng = rng_for(cfg.seed, &[ROLLOUT, self.iteration]);
        let mut r = Rollout {
            batch: RolloutBatch {
                p: Array2::zeros((rows, POLICY_DIM)),
                s: Array2::zeros((rows, PRIVILEGED_DIM)),
                actions: Array2::zeros((rows, ACTION_DIM)),
                log_prob: Array1::zeros(rows),
                values: Array1::zeros(rows),
                advantages: Array1::zeros(rows),
                returns: Array1::zeros(rows),
            },
            history: Array2::zeros((rows, HISTORY_DIM)),
            mass_target: Array2::zeros((rows, 4)),
            contact_target: Array2::zeros((rows, 13)),
            next_obs: Array2::zeros((rows, OBS_DIM)),
            rewards: vec![0.0; rows],
            dones: vec![false; rows],
            raw_obs: Vec::with_capacity(rows * OBS_DIM),
            raw_privileged: Vec::with_capacity(rows * PRIVILEGED_DIM),
            ..Default::default()
        };
        let mut bootstrap = vec![0.0f64; rows];
        for t in 0..horizon {
            let noise = Array2::from_shape_simple_fn((n, LATENT_DIM), || rng.sample::<f32, _>(StandardNormal));
            let inf = agent.infer(&self.envs, Some(noise.view()));
            let raw_s: Vec<Vec<f64>> = self.envs.par_iter().map(Env::privileged).collect();
            let s = agent.normalize_privileged(&raw_s);
            let values = agent.values(s.view());
            let mean = agent.policy.act_mean(inf.p.view());
            let (actions, log_prob) = sample_actions(&mean, &agent.policy.log_std, &mut rng);
            let base = t * n;
            let rows_t = base..base + n;
            r.batch.p.slice_mut(ndarray::s![rows_t.clone(), ..]).assign(&inf.p);
            r.batch.s.slice_mut(ndarray::s![rows_t.clone(), ..]).assign(&s);
            r.batch.actions.slice_mut(ndarray::s![rows_t.clone(), ..]).assign(&actions);
            r.batch.log_prob.slice_mut(ndarray::s![rows_t.clone()]).assign(&log_prob);
            r.batch.values.slice_mut(ndarray::s![rows_t.clone()]).assign(&values);
            r.history.slice_mut(ndarray::s![rows_t.clone(), ..]).assign(&inf.history);
            for (i, env) in self.envs.iter().enumerate() {
                for k in 0..4 {
                    r.mass_target[[base + i, k]] = env.mass_target[k] as f32;
                }
                for (k, c) in env.contact_target().iter().enumerate() {
                    r.contact_target[[base + i, k]] = *c as f32;
                }
                r.raw_obs.extend_from_slice(&env.obs);
            }
            for s in &raw_s {
                r.raw_privileged.extend_from_slice(s);
            }

            let outcomes: Vec<Result<StepOutcome>> = self
                .envs
                .par_iter_mut()
                .enumerate()
                .map(|(i, env)| {
                    let a: Vec<f64> = actions.row(i).iter().map(|&x| x as f64).collect();
                    env.step(cfg, &a)
                })
                .collect();
            let mut terminal: Vec<(usize, Vec<f64>)> = Vec::new();
            for (i, out) in outcomes.into_iter().enumerate() {
                let out = out?;
                let row = base + i;
                r.rewards[row] = out.reward.total();
                let next = agent.normalize_obs(&out.next_obs);
                for k in 0..OBS_DIM {
                    r.next_obs[[row, k]] = next[k];
                }
                if let Some(f) = out.finished {
                    r.dones[row] = true;
                    if f.result.reason == TerminalReason::Fault {
                        r.faults += 1;
                    }
                    if let Some(s) = f.terminal_state {
                        terminal.push((row, s));
                    }
                    r.episodes.push(f.result);
                }
            }
            if !terminal.is_empty() {
                // Time limits are truncations: bootstrap from the final state.
                let s: Vec<Vec<f64>> = terminal.iter().map(|(_, s)| s.clone()).collect();
                let v = agent.values(agent.normalize_privileged(&s).view());
                for ((row, _), v) in terminal.iter().zip(v) {
                    bootstrap[*row] = cfg.ppo.gamma * v as f64;
                }
            }
        }
        let raw_s: Vec<Vec<f64>> = self.envs.par_iter().map(Env::privileged).collect();
        let last_values = agent.values(agent.normalize_privileged(&raw_s).view());

        let mut adv = vec![0.0; rows];
        let mut ret = vec![0.0; rows];
        for i in 0..n {
            let idx: Vec<usize> = (0..horizon).map(|t| t * n + i).collect();
            let rew: Vec<f64> = idx.iter().map(|&k| r.rewards[k] + bootstrap[k]).collect();
            let val: Vec<f64> = idx.iter().map(|&k| r.batch.values[k] as f64).collect();
            let done: Vec<bool> = idx.iter().map(|&k| r.dones[k]).collect();
            let (a, g) = gae(&rew, &val, &done, last_values[i] as f64, cfg.ppo.gamma, cfg.ppo.lambda);
            for (j, &k) in idx.iter().enumerate() {
                adv[k] = a[j];
                ret[k] = g[j];
            }
        }
        normalize_advantages(&mut adv);
        r.batch.advantages = adv.iter().map(|&x| x as f32).collect();
        r.batch.returns = ret.iter().map(|&x| x as f32).collect();
        for (c, env) in self.curricula.iter_mut().zip(&self.envs) {
            *c = env.curriculum.clone();
        }
        Ok(r)
    }

    /// One full training iteration. Non-finite losses or parameters restore
    /// the last checkpoint with halved learning rates.
    pub fn iterate(&mut self) -> Result<IterationStats> {
        let rollout = self.rollout()?;
        let mut rng = rng_for(self.cfg.seed, &[UPDATE, self.iteration]);
        let mut mcp_rng = rng_for(self.cfg.seed, &[UPDATE, self.iteration, 1]);
        let mut mcp_terms = McpLossTerms::default();
        let mut mcp_steps = 0usize;
        let ppo = {
            let Self { agent, policy_adam, mcp_adam, cfg, .. } = self;
            let mcp = &mut agent.mcp;
            let ablation = agent.ablation;
            ppo_update(&mut agent.policy, policy_adam, &rollout.batch, &cfg.ppo, &mut rng, |idx| {
                let hist = rollout.history.select(Axis(0), idx);
                let mass = rollout.mass_target.select(Axis(0), idx);
                let contact = rollout.contact_target.select(Axis(0), idx);
                let next = rollout.next_obs.select(Axis(0), idx);
                let noise = Array2::from_shape_simple_fn((idx.len(), LATENT_DIM), || {
                    mcp_rng.sample::<f32, _>(StandardNormal)
                });
                let targets = McpTargets { mass: mass.view(), contact: contact.view(), next_obs: next.view() };
                let (terms, grads) = mcp.loss_and_grad(hist.view(), &targets, noise.view(), &ablation, &cfg.mcp);
                let mut g = grads.to_flat();
                clip_grad_norm(&mut g, cfg.mcp.max_grad_norm);
                mcp_adam.update(mcp, &g);
                mcp_terms = mcp_terms + terms;
                mcp_steps += 1;
            })
        };
        let k = mcp_steps.max(1) as f64;
        let mcp = McpLossTerms {
            mass_mse: mcp_terms.mass_mse / k,
            contact_bce: mcp_terms.contact_bce / k,
            recon_mse: mcp_terms.recon_mse / k,
            kl: mcp_terms.kl / k,
            total: mcp_terms.total / k,
        };
        self.finish_iteration(&rollout, ppo, mcp)
    }

    fn finish_iteration(
        &mut self,
        rollout: &Rollout,
        ppo: crate::policy::PpoStats,
        mcp: McpLossTerms,
    ) -> Result<IterationStats> {
        let eps = &rollout.episodes;
        let ne = eps.len().max(1) as f64;
        let mut term_means = [0.0; NUM_TERMS];
        for e in eps {
            for (m, s) in term_means.iter_mut().zip(e.reward_sums) {
                *m += s / ne;
            }
        }
        let nan_if_empty = |x: f64| if eps.is_empty() { f64::NAN } else { x };
        self.env_steps += rollout.rewards.len() as u64;
        let stats = IterationStats {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_step_reward: rollout.rewards.iter().sum::<f64>() / rollout.rewards.len() as f64,
            episodes: eps.len(),
            mean_episode_return: nan_if_empty(term_means.iter().sum()),
            success_rate: nan_if_empty(eps.iter().filter(|e| e.success).count() as f64 / ne),
            mean_level: self.curricula.iter().map(|c| c.level as f64).sum::<f64>() / self.curricula.len() as f64,
            faults: rollout.faults,
            ppo: ppo.mean(),
            ppo_epochs: ppo.epochs.len(),
            learning_rate: ppo.learning_rate,
            mcp,
            term_means,
        };
        if !stats.is_finite() || !self.agent.is_finite() {
            self.recover(&stats)?;
            return Ok(stats);
        }
        self.agent.obs_norm.update(&rollout.raw_obs);
        self.agent.priv_norm.update(&rollout.raw_privileged);
        if let Some(m) = self.metrics.as_mut() {
            m.write(&stats)?;
        }
        self.iteration += 1;
        if self.at_checkpoint_boundary() {
            self.agent.obs_norm.round_to_f32();
            self.agent.priv_norm.round_to_f32();
            self.last_good = self.checkpoint();
            if let Some(dir) = &self.checkpoint_dir {
                let path = dir.join(format!("ckpt_{:06}.bin", self.iteration));
                self.last_good.save(&path)?;
                self.last_good.save(&dir.join("latest.bin"))?;
                log::info!("saved {}", path.display());
            }
        }
        Ok(stats)
    }

    fn recover(&mut self, stats: &IterationStats) -> Result<()> {
        self.nan_recoveries += 1;
        log::warn!(
            "non-finite loss at iteration {} (recovery {}/{})",
            stats.iteration,
            self.nan_recoveries,
            self.cfg.max_nan_recoveries
        );
        if self.nan_recoveries > self.cfg.max_nan_recoveries {
            return Err(Error::TrainingAborted(format!(
                "non-finite loss persisted after {} recoveries",
                self.cfg.max_nan_recoveries
            )));
        }
        let recoveries = self.nan_recoveries;
        let ck = self.last_good.clone();
        self.restore(&ck)?;
        self.nan_recoveries = recoveries;
        self.policy_adam.lr *= 0.5;
        self.mcp_adam.lr *= 0.5;
        Ok(())
    }

    /// Runs until `cfg.iterations` have completed.
    pub fn train(&mut self, mut on_iteration: impl FnMut(&IterationStats)) -> Result<()> {
        while self.iteration < self.cfg.iterations as u64 {
            let s = self.iterate()?;
            on_iteration(&s);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("iteration", self.iteration);
        c.set_meta("env_steps", self.env_steps);
        c.set_meta("nan_recoveries", self.nan_recoveries);
        c.set_meta("policy_adam.lr", self.policy_adam.lr);
        c.set_meta("policy_adam.step", self.policy_adam.step);
        c.set_meta("mcp_adam.lr", self.mcp_adam.lr);
        c.set_meta("mcp_adam.step", self.mcp_adam.step);
        c.set_meta("norm.obs.count", self.agent.obs_norm.count);
        c.set_meta("norm.privileged.count", self.agent.priv_norm.count);
        c.add_blob("config", self.cfg.to_toml_string().into_bytes());
        let mut cur = String::new();
        for s in &self.curricula {
            let _ = writeln!(cur, "{} {} {} {} {}", s.family, s.level, s.promotions, s.demotions, s.resamples);
        }
        c.add_blob("curriculum", cur.into_bytes());
        c.add_params(&self.agent.policy);
        c.add_params(&self.agent.mcp);
        for (name, n) in [("norm.obs", &self.agent.obs_norm), ("norm.privileged", &self.agent.priv_norm)] {
            c.add_tensor(&format!("{name}.mean"), vec![n.dim()], n.mean.iter().map(|&x| x as f32).collect());
            c.add_tensor(&format!("{name}.var"), vec![n.dim()], n.var.iter().map(|&x| x as f32).collect());
        }
        for (name, a) in [("policy_adam", &self.policy_adam), ("mcp_adam", &self.mcp_adam)] {
            c.add_tensor(&format!("{name}.m"), vec![a.m.len()], a.m.clone());
            c.add_tensor(&format!("{name}.v"), vec![a.v.len()], a.v.clone());
        }
        c
    }

    /// Restores all training state from `c`; environments are rebuilt on the next rollout.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        c.load_params(&mut self.agent.policy)?;
        c.load_params(&mut self.agent.mcp)?;
        for (name, n) in [("norm.obs", &mut self.agent.obs_norm), ("norm.privileged", &mut self.agent.priv_norm)] {
            let d = n.dim();
            n.mean = c.tensor_data(&format!("{name}.mean"), d)?.iter().map(|&x| x as f64).collect();
            n.var = c.tensor_data(&format!("{name}.var"), d)?.iter().map(|&x| x as f64).collect();
            n.count = c.meta(&format!("{name}.count"))?;
        }
        for (name, a) in [("policy_adam", &mut self.policy_adam), ("mcp_adam", &mut self.mcp_adam)] {
            let len = a.m.len();
            a.m = c.tensor_data(&format!("{name}.m"), len)?.to_vec();
            a.v = c.tensor_data(&format!("{name}.v"), len)?.to_vec();
            a.lr = c.meta(&format!("{name}.lr"))?;
            a.step = c.meta(&format!("{name}.step"))?;
        }
        self.iteration = c.meta("iteration")?;
        self.env_steps = c.meta("env_steps")?;
        self.nan_recoveries = c.meta("nan_recoveries")?;
        let text = std::str::from_utf8(c.blob("curriculum")?)
            .map_err(|_| Error::CorruptCheckpoint("curriculum is not UTF-8".into()))?;
        let mut curricula = Vec::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            let bad = || Error::CorruptCheckpoint(format!("bad curriculum line `{line}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let mut s = CurriculumState::new(f[0].parse()?, f[1].parse().map_err(|_| bad())?);
            s.promotions = f[2].parse().map_err(|_| bad())?;
            s.demotions = f[3].parse().map_err(|_| bad())?;
            s.resamples = f[4].parse().map_err(|_| bad())?;
            curricula.push(s);
        }
        if curricula.len() != self.cfg.num_envs {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint has {} environments, config has {}",
                curricula.len(),
                self.cfg.num_envs
            )));
        }
        self.curricula = curricula;
        self.envs.clear();
        self.last_good = c.clone();
        Ok(())
    }

    /// Builds a trainer from a checkpoint, using its stored config.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let text = std::str::from_utf8(c.blob("config")?)
            .map_err(|_| Error::CorruptCheckpoint("config is not UTF-8".into()))?;
        let cfg = RunConfig::from_toml_str(text)?;
        let mut t = Self::new(cfg)?;
        t.restore(c)?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn normalizers(&self) -> (&Normalizer, &Normalizer) {
        (&self.agent.obs_norm, &self.agent.priv_norm)
    }
}

/// Agent and config stored in a checkpoint, for evaluation.
pub fn load_agent(path: &Path) -> Result<(RunConfig, Agent)> {
    let t = Trainer::load(path)?;
    let mut agent = t.agent;
    agent.obs_norm.frozen = true;
    agent.priv_norm.frozen = true;
    Ok((t.cfg, agent))
}
