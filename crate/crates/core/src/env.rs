//! One training or evaluation environment: a randomized robot on a terrain,
//! its observation history and its episode bookkeeping.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{evaluate_success, EpisodeResult, TerminalReason, TraceStep};
use crate::morphology::{normalize_mass_vector, ControlRandomization, MorphologySpec, NUM_JOINTS};
use crate::observation::{
    build_o, build_s, height_scan, History, PrivilegedInfo, OBS_DIM, PRIVILEGED_DIM,
};
use crate::policy::compose_target;
use crate::rewards::{self, MotionInputs, RewardBreakdown, StepInputs, NUM_TERMS};
use crate::sim::{ContactReport, SimState, Simulator};
use crate::terrain::{self, CurriculumState, TerrainFamily};

/// Mixes a run seed with stream identifiers into an independent RNG seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    /// Noise-free observation after the step, taken before any reset.
    pub next_obs: [f64; OBS_DIM],
    /// Set when the step ended an episode; the env has already been reset.
    pub finished: Option<FinishedEpisode>,
}

#[derive(Debug, Clone)]
pub struct FinishedEpisode {
    pub result: EpisodeResult,
    /// Raw privileged state at the time limit, for value bootstrapping.
    pub terminal_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub index: usize,
    pub curriculum: CurriculumState,
    pub sim: Simulator,
    pub morphology: MorphologySpec,
    pub state: SimState,
    pub contacts: ContactReport,
    /// Noisy observation frames as seen by the policy.
    pub history: History,
    pub obs: [f64; OBS_DIM],
    pub clean_obs: [f64; OBS_DIM],
    pub prev_action: [f64; NUM_JOINTS],
    pub spawn_xy: [f64; 2],
    pub standing_height: f64,
    /// Normalized mass vector of this robot including payload.
    pub mass_target: [f64; 4],
    pub step: usize,
    pub trace: Vec<TraceStep>,
    pub reward_sums: [f64; NUM_TERMS],
    pub rng: ChaCha8Rng,
}

impl Env {
    /// Builds and resets an environment at the curriculum position given.
    pub fn new(cfg: &RunConfig, index: usize, curriculum: CurriculumState, rng: ChaCha8Rng) -> Result<Self> {
        let mut rng = rng;
        let (sim, morphology, state) = Self::spawn(cfg, &curriculum, &mut rng)?;
        let mut env = Self {
            index,
            curriculum,
            contacts: ContactReport::default(),
            standing_height: sim.standing_height(&cfg.rewards.q_stand),
            spawn_xy: [state.base_pos.x, state.base_pos.y],
            mass_target: [0.0; 4],
            sim,
            morphology,
            state,
            history: History::new(),
            obs: [0.0; OBS_DIM],
            clean_obs: [0.0; OBS_DIM],
            prev_action: [0.0; NUM_JOINTS],
            step: 0,
            trace: Vec::new(),
            reward_sums: [0.0; NUM_TERMS],
            rng,
        };
        env.begin_episode(cfg);
        Ok(env)
    }

    fn spawn<R: Rng>(
        cfg: &RunConfig,
        curriculum: &CurriculumState,
        rng: &mut R,
    ) -> Result<(Simulator, MorphologySpec, SimState)> {
        let mut last_err = None;
        for _ in 0..10 {
            let morph = if cfg.randomize_morphology {
                MorphologySpec::sample(&cfg.morphology, rng)
            } else {
                MorphologySpec::midpoint(&cfg.morphology)
            };
            let control = if cfg.randomize_control {
                ControlRandomization::sample(&cfg.control, rng)
            } else {
                ControlRandomization::nominal(&cfg.control)
            };
            let hf = terrain::generate(&cfg.terrain, curriculum.family, curriculum.level, rng.gen())?;
            let sim = Simulator::new(&morph, &control, &cfg.sim, Arc::new(hf));
            match sim.reset_supine(rng) {
                Ok(state) if state.is_finite() => return Ok((sim, morph, state)),
                Ok(_) => log::warn!("non-finite supine reset, resampling"),
                Err(e) => {
                    log::warn!("supine reset failed: {e}");
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.unwrap_or_else(|| crate::Error::SimulationFault {
            time: 0.0,
            reason: "no finite supine reset after 10 attempts".into(),
        }))
    }

    fn begin_episode(&mut self, cfg: &RunConfig) {
        let mass_ranges = cfg.morphology.mass_ranges(&cfg.control);
        self.mass_target = normalize_mass_vector(
            &self.morphology.mass_vector(self.sim.control.payload),
            &mass_ranges,
        );
        self.standing_height = self.sim.standing_height(&cfg.rewards.q_stand);
        self.spawn_xy = [self.state.base_pos.x, self.state.base_pos.y];
        self.contacts = self.sim.contact_report(&self.state);
        self.prev_action = [0.0; NUM_JOINTS];
        self.step = 0;
        self.trace.clear();
        self.reward_sums = [0.0; NUM_TERMS];
        self.history.clear();
        self.observe(cfg);
    }

    fn observe(&mut self, cfg: &RunConfig) {
        self.clean_obs = build_o(&self.state, &self.prev_action);
        self.obs = self.clean_obs;
        cfg.noise.apply(&mut self.obs, &mut self.rng);
        self.history.push(&self.obs);
    }

    /// Starts a new episode with fresh randomization at the current curriculum level.
    pub fn reset(&mut self, cfg: &RunConfig) -> Result<()> {
        let (sim, morph, state) = Self::spawn(cfg, &self.curriculum, &mut self.rng)?;
        self.sim = sim;
        self.morphology = morph;
        self.state = state;
        self.begin_episode(cfg);
        Ok(())
    }

    pub fn reseed(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn family(&self) -> TerrainFamily {
        self.curriculum.family
    }

    /// Raw privileged state `s` of the current step.
    pub fn privileged(&self) -> Vec<f64> {
        let scan = height_scan(&self.sim.terrain, &self.state.base_pos, &self.state.base_quat);
        let masses = self.mass_target;
        let info = PrivilegedInfo {
            masses: &masses,
            kp: &self.sim.control.kp,
            kd: &self.sim.control.kd,
            com_shift: &self.sim.control.com_shift,
            contacts: &self.contacts,
            friction: self.sim.control.ground_friction,
        };
        let s = build_s(&self.clean_obs, &scan, &info).expect("fixed component sizes");
        debug_assert_eq!(s.len(), PRIVILEGED_DIM);
        s
    }

    /// Component contact flags of the current step as 0/1 values.
    pub fn contact_target(&self) -> [f64; 13] {
        std::array::from_fn(|k| if self.contacts.body_contact[k] { 1.0 } else { 0.0 })
    }

    /// Applies one policy action. Ends and resets the episode at the step
    /// limit; a simulation fault resets the env and reports a faulted episode.
    pub fn step(&mut self, cfg: &RunConfig, action: &[f64]) -> Result<StepOutcome> {
        let clip = cfg.policy.action_clip;
        let a: [f64; NUM_JOINTS] = std::array::from_fn(|j| action[j].clamp(-clip, clip));
        let target = compose_target(
            &a,
            &cfg.rewards.q_stand,
            &cfg.policy,
            &self.sim.model.lower,
            &self.sim.model.upper,
        );
        let dt = cfg.control_dt;
        let stepped = self
            .sim
            .step_control(&self.state, &target, dt)
            .and_then(|(s, r)| {
                if s.is_finite() {
                    Ok((s, r))
                } else {
                    Err(crate::Error::SimulationFault { time: s.time, reason: "non-finite state".into() })
                }
            });
        let (next, report) = match stepped {
            Ok(x) => x,
            Err(e) => {
                log::warn!("env {} quarantined: {e}", self.index);
                let result = self.finish(cfg, TerminalReason::Fault);
                let next_obs = self.clean_obs;
                self.reset(cfg)?;
                return Ok(StepOutcome {
                    reward: RewardBreakdown::default(),
                    next_obs,
                    finished: Some(FinishedEpisode { result, terminal_state: None }),
                });
            }
        };
        let qdd: [f64; NUM_JOINTS] = std::array::from_fn(|j| (next.qd[j] - self.state.qd[j]) / dt);
        let g = next.projected_gravity();
        let inputs = StepInputs {
            gravity: [g.x, g.y, g.z],
            feet: &report.foot_contact,
            body_contact_any: report.any_body_contact(),
            knee_fxy: &report.knee_force_xy,
            p_current_xy: [next.base_pos.x, next.base_pos.y],
            p_init_xy: self.spawn_xy,
            motion: MotionInputs {
                q: &next.q,
                qd: &next.qd,
                qdd: &qdd,
                torque: &report.torque,
                action: &a,
                prev_action: &self.prev_action,
                lower: &self.sim.model.lower,
                upper: &self.sim.model.upper,
            },
        };
        let reward = rewards::compute(&inputs, &cfg.rewards, dt);
        for (s, t) in self.reward_sums.iter_mut().zip(reward.terms) {
            *s += t;
        }
        self.state = next;
        self.contacts = report;
        self.prev_action = a;
        self.step += 1;
        self.trace.push(self.trace_step(cfg));
        self.observe(cfg);
        let next_obs = self.clean_obs;

        let finished = if self.step >= cfg.episode_steps {
            let terminal_state = Some(self.privileged());
            let result = self.finish(cfg, TerminalReason::TimeLimit);
            if cfg.curriculum {
                let (success, disp) = (result.success, result.displacement);
                self.curriculum.update_level(success, disp, &mut self.rng);
            }
            self.reset(cfg)?;
            Some(FinishedEpisode { result, terminal_state })
        } else {
            None
        };
        Ok(StepOutcome { reward, next_obs, finished })
    }

    fn trace_step(&self, cfg: &RunConfig) -> TraceStep {
        let s = &self.state;
        let posture = s
            .q
            .iter()
            .zip(&cfg.rewards.q_stand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        TraceStep {
            time: self.step as f64 * cfg.control_dt,
            gravity_z: s.projected_gravity().z,
            height: self.sim.base_height(s),
            posture_error: posture,
            displacement: (s.base_pos.x - self.spawn_xy[0]).hypot(s.base_pos.y - self.spawn_xy[1]),
        }
    }

    /// Evaluates the episode so far.
    pub fn finish(&self, cfg: &RunConfig, reason: TerminalReason) -> EpisodeResult {
        let mut r = evaluate_success(&self.trace, self.standing_height, &cfg.success, cfg.control_dt);
        r.reason = reason;
        r.reward_sums = self.reward_sums;
        r.steps = self.step;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{HISTORY_DIM, POLICY_DIM};

    fn small_cfg() -> RunConfig {
        RunConfig {
            num_envs: 2,
            episode_steps: 30,
            families: vec![TerrainFamily::Rough],
            ..Default::default()
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
    }

    #[test]
    fn episode_runs_to_time_limit_and_resets() {
        let cfg = small_cfg();
        let cur = CurriculumState::new(TerrainFamily::Rough, 1);
        let mut env = Env::new(&cfg, 0, cur, rng_for(3, &[0])).unwrap();
        assert_eq!(env.history.flatten().len(), HISTORY_DIM);
        assert_eq!(env.privileged().len(), PRIVILEGED_DIM);
        assert!(POLICY_DIM == 75);
        let mut finished = 0;
        for t in 0..cfg.episode_steps * 2 {
            let out = env.step(&cfg, &[0.0; 12]).unwrap();
            assert!(out.reward.total().is_finite());
            if let Some(f) = out.finished {
                finished += 1;
                assert_eq!(t + 1, cfg.episode_steps * finished);
                assert_eq!(f.result.reason, TerminalReason::TimeLimit);
                assert_eq!(f.terminal_state.unwrap().len(), PRIVILEGED_DIM);
                assert_eq!(env.step, 0);
                assert!(env.trace.is_empty());
            }
        }
        assert_eq!(finished, 2);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let cfg = small_cfg();
        let run = || {
            let cur = CurriculumState::new(TerrainFamily::Rough, 2);
            let mut env = Env::new(&cfg, 0, cur, rng_for(9, &[1])).unwrap();
            let mut out = Vec::new();
            for k in 0..20 {
                let a = [0.1 * (k as f64).sin(); 12];
                out.push(env.step(&cfg, &a).unwrap().reward.total());
            }
            (out, env.state.base_pos)
        };
        assert_eq!(run(), run());
    }
}
