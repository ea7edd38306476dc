//! Recovery success test, held-out evaluation and the success-rate matrix.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;

use crate::agent::Agent;
use crate::config::{RunConfig, SuccessCriteria};
use crate::env::{rng_for, Env};
use crate::error::Result;
use crate::rewards::NUM_TERMS;
use crate::terrain::{CurriculumState, TerrainFamily};

/// Per-step quantities the success test needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    /// Time at the end of the step, s.
    pub time: f64,
    pub gravity_z: f64,
    /// Base height above the terrain below it, m.
    pub height: f64,
    /// `‖q − q_stand‖∞`, rad.
    pub posture_error: f64,
    /// Horizontal distance from the spawn point, m.
    pub displacement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalReason {
    #[default]
    TimeLimit,
    Fault,
    /// Evaluation horizon reached before the episode limit.
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeResult {
    pub success: bool,
    /// Start of the first stable upright window, s.
    pub time_to_upright: Option<f64>,
    /// Displacement at the end of the stable window on success, final otherwise.
    pub displacement: f64,
    pub reason: TerminalReason,
    pub reward_sums: [f64; NUM_TERMS],
    pub steps: usize,
}

fn upright(s: &TraceStep, standing_height: f64, c: &SuccessCriteria) -> bool {
    (s.gravity_z + 1.0).abs() < c.gravity_tolerance
        && s.height > c.height_fraction * standing_height
        && s.posture_error < c.posture_tolerance
}

/// Success iff some window of `c.window` seconds of consecutive upright steps
/// ends no later than `c.deadline` with displacement under the bound at its end.
pub fn evaluate_success(
    trace: &[TraceStep],
    standing_height: f64,
    c: &SuccessCriteria,
    dt: f64,
) -> EpisodeResult {
    let need = ((c.window / dt).round() as usize).max(1);
    let mut run = 0usize;
    for (k, s) in trace.iter().enumerate() {
        if s.time > c.deadline + 1e-9 {
            break;
        }
        run = if upright(s, standing_height, c) { run + 1 } else { 0 };
        if run >= need && s.displacement < c.max_displacement {
            let start = trace[k + 1 - need].time - dt;
            return EpisodeResult {
                success: true,
                time_to_upright: Some(start.max(0.0)),
                displacement: s.displacement,
                ..Default::default()
            };
        }
    }
    EpisodeResult {
        success: false,
        time_to_upright: None,
        displacement: trace.last().map_or(0.0, |s| s.displacement),
        ..Default::default()
    }
}

/// Chooses actions for a batch of environments.
pub trait Controller: Sync {
    fn act(&self, envs: &[Env]) -> Array2<f32>;
}

/// Deterministic policy: mean action, mean latent.
impl Controller for Agent {
    fn act(&self, envs: &[Env]) -> Array2<f32> {
        let inf = self.infer(envs, None);
        self.policy.act_mean(inf.p.view())
    }
}

/// Always commands the initial pose.
pub struct ZeroAction;

impl Controller for ZeroAction {
    fn act(&self, envs: &[Env]) -> Array2<f32> {
        Array2::zeros((envs.len(), crate::policy::ACTION_DIM))
    }
}

/// Predictor output against ground truth for one step of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct McpRecord {
    pub episode: usize,
    pub step: usize,
    pub mass_pred: [f64; 4],
    pub mass_true: [f64; 4],
    pub contact_pred: [f64; 13],
    pub contact_true: [f64; 13],
    /// Mean absolute joint torque over the step that led here, N·m.
    pub joint_load: f64,
}

/// One row per record: episode, step, joint load, then the predicted and
/// true masses (normalized) and contacts, indexed by component.
pub fn mcp_csv(records: &[McpRecord]) -> String {
    let mut out = String::from("episode,step,joint_load");
    for prefix in ["mass_pred", "mass_true"] {
        for k in 0..4 {
            let _ = write!(out, ",{prefix}_{k}");
        }
    }
    for prefix in ["contact_pred", "contact_true"] {
        for k in 0..13 {
            let _ = write!(out, ",{prefix}_{k}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{:.6}", r.episode, r.step, r.joint_load);
        for v in r.mass_pred.iter().chain(&r.mass_true).chain(&r.contact_pred).chain(&r.contact_true) {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct EvalRun {
    pub results: Vec<EpisodeResult>,
    pub mcp: Vec<McpRecord>,
}

impl EvalRun {
    pub fn success_rate(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.success).count() as f64 / self.results.len() as f64
    }
}

/// Stream tag keeping evaluation seeds apart from training seeds.
const EVAL_STREAM: u64 = 0x4556_414C;

/// Runs `episodes` fresh episodes at a fixed family and level until the
/// success deadline (or the episode limit, if shorter).
pub fn run_episodes(
    controller: &dyn Controller,
    cfg: &RunConfig,
    family: TerrainFamily,
    level: u32,
    episodes: usize,
    seed: u64,
    record_mcp: Option<&Agent>,
) -> Result<EvalRun> {
    let mut cfg = cfg.clone();
    cfg.curriculum = false;
    let cfg = &cfg;
    let mut envs: Vec<Env> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let rng = rng_for(seed, &[EVAL_STREAM, family.index() as u64, level as u64, i as u64]);
            Env::new(cfg, i, CurriculumState::new(family, level), rng)
        })
        .collect::<Result<_>>()?;
    let horizon = ((cfg.success.deadline / cfg.control_dt).round() as usize).min(cfg.episode_steps);
    let mut run = EvalRun::default();
    let mut done: Vec<Option<EpisodeResult>> = vec![None; episodes];
    for t in 0..horizon {
        if let Some(agent) = record_mcp {
            let inf = agent.infer(&envs, None);
            for (i, env) in envs.iter().enumerate() {
                if done[i].is_some() {
                    continue;
                }
                run.mcp.push(McpRecord {
                    episode: i,
                    step: t,
                    mass_pred: std::array::from_fn(|k| inf.mcp.mass[[i, k]] as f64),
                    mass_true: env.mass_target,
                    contact_pred: std::array::from_fn(|k| inf.mcp.contact[[i, k]] as f64),
                    contact_true: env.contact_target(),
                    joint_load: env.contacts.torque.iter().map(|x| x.abs()).sum::<f64>() / 12.0,
                });
            }
        }
        let actions = controller.act(&envs);
        let outcomes: Vec<Result<Option<EpisodeResult>>> = envs
            .par_iter_mut()
            .enumerate()
            .map(|(i, env)| {
                let a: Vec<f64> = actions.row(i).iter().map(|&x| x as f64).collect();
                let out = env.step(cfg, &a)?;
                Ok(out.finished.map(|f| f.result))
            })
            .collect();
        for (i, o) in outcomes.into_iter().enumerate() {
            if let Some(r) = o? {
                done[i].get_or_insert(r);
            }
        }
    }
    for (i, env) in envs.iter().enumerate() {
        let r = done[i]
            .take()
            .unwrap_or_else(|| env.finish(cfg, TerminalReason::Horizon));
        run.results.push(r);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCell {
    pub family: TerrainFamily,
    pub level: u32,
    /// Success rate of each seed.
    pub rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Mean and standard deviation of the success rate over seeds for every
/// (family, level) cell.
pub fn success_matrix(
    controller: &dyn Controller,
    cfg: &RunConfig,
    families: &[TerrainFamily],
    levels: &[u32],
    episodes: usize,
    seeds: usize,
) -> Result<Vec<SuccessCell>> {
    let mut cells = Vec::new();
    for &family in families {
        for &level in levels {
            let mut rates = Vec::with_capacity(seeds);
            for k in 0..seeds {
                let seed = crate::env::derive_seed(cfg.seed, &[EVAL_STREAM, k as u64]);
                rates.push(run_episodes(controller, cfg, family, level, episodes, seed, None)?.success_rate());
            }
            let (mean, std) = mean_std(&rates);
            log::info!("{family} level {level}: {mean:.3} ± {std:.3}");
            cells.push(SuccessCell { family, level, rates, mean, std, episodes });
        }
    }
    Ok(cells)
}

pub fn success_csv(cells: &[SuccessCell]) -> String {
    let mut out = String::from("family,level,mean,std,seeds,episodes\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            c.family,
            c.level,
            c.mean,
            c.std,
            c.rates.len(),
            c.episodes
        );
    }
    out
}

/// Fractional ranks (ties share their mean rank), 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = rank;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman correlation between level and mean success for each family.
pub fn level_trend(cells: &[SuccessCell]) -> Vec<(TerrainFamily, f64)> {
    let mut families: Vec<TerrainFamily> = cells.iter().map(|c| c.family).collect();
    families.dedup();
    families
        .into_iter()
        .map(|f| {
            let (l, s): (Vec<f64>, Vec<f64>) = cells
                .iter()
                .filter(|c| c.family == f)
                .map(|c| (c.level as f64, c.mean))
                .unzip();
            (f, spearman(&l, &s))
        })
        .collect()
}
