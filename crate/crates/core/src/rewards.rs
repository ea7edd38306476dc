//! Recovery reward: orientation and posture, contact management, stability
//! and motion constraints.

use serde::{Deserialize, Serialize};

use crate::morphology::{NUM_JOINTS, NUM_LEGS};

/// Nominal standing pose: hip 0, thigh 0.8, calf −1.5 rad per leg.
pub const STAND_POSE: [f64; NUM_JOINTS] = [
    0.0, 0.8, -1.5, 0.0, 0.8, -1.5, 0.0, 0.8, -1.5, 0.0, 0.8, -1.5,
];

pub const NUM_TERMS: usize = 13;

pub const TERM_NAMES: [&str; NUM_TERMS] = [
    "base_orientation",
    "upright",
    "target_posture",
    "feet_contact",
    "body_contact",
    "knee_force",
    "body_bias",
    "position_limits",
    "ang_vel_limit",
    "joint_acc",
    "joint_vel",
    "action_smooth",
    "torque",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub base_orientation: f64,
    pub upright: f64,
    pub target_posture: f64,
    pub feet_contact: f64,
    pub body_contact: f64,
    pub knee_force: f64,
    pub body_bias: f64,
    pub position_limits: f64,
    pub ang_vel_limit: f64,
    pub joint_acc: f64,
    pub joint_vel: f64,
    pub action_smooth: f64,
    pub torque: f64,
    /// Width of the upright Gaussian.
    pub eps_gauss: f64,
    /// |g_z + 1| below which the posture term is active.
    pub eps_ind: f64,
    /// Squared-distance scale of the posture term, rad².
    pub posture_scale: f64,
    /// Joint speed above which the angular-velocity-limit term accrues, rad/s.
    pub ang_vel_threshold: f64,
    /// Upper clip of the body-bias distance, m.
    pub body_bias_clip: f64,
    pub q_stand: [f64; NUM_JOINTS],
    /// Multiply every term by the control period.
    pub scale_by_dt: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            base_orientation: -0.5,
            upright: 6.0,
            target_posture: 4.0,
            feet_contact: 0.3,
            body_contact: -0.2,
            knee_force: -1.0e-2,
            body_bias: -0.1,
            position_limits: -1.0,
            ang_vel_limit: -0.1,
            joint_acc: -2.5e-6,
            joint_vel: -1.0e-2,
            action_smooth: -0.01,
            torque: -5.0e-4,
            eps_gauss: 0.25,
            eps_ind: 0.1,
            posture_scale: 1.0,
            ang_vel_threshold: 0.8,
            body_bias_clip: 4.0,
            q_stand: STAND_POSE,
            scale_by_dt: false,
        }
    }
}

/// Weighted value of every term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardBreakdown {
    pub terms: [f64; NUM_TERMS],
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        TERM_NAMES.iter().position(|n| *n == name).map(|i| self.terms[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        TERM_NAMES.iter().copied().zip(self.terms.iter().copied())
    }
}

/// Base orientation, upright Gaussian and gated target posture.
pub fn r_orientation(g: &[f64; 3], q: &[f64; NUM_JOINTS], cfg: &RewardConfig) -> [f64; 3] {
    let tilt = cfg.base_orientation * (g[0] * g[0] + g[1] * g[1]);
    let up = (g[2] + 1.0).powi(2);
    let upright = cfg.upright * (-up / (2.0 * cfg.eps_gauss * cfg.eps_gauss)).exp();
    let posture = if (g[2] + 1.0).abs() < cfg.eps_ind {
        let d2: f64 = q.iter().zip(&cfg.q_stand).map(|(a, b)| (a - b).powi(2)).sum();
        cfg.target_posture * (-d2 / cfg.posture_scale).exp()
    } else {
        0.0
    };
    [tilt, upright, posture]
}

/// Feet contact count and the single non-foot contact indicator.
pub fn r_contact(feet: &[bool; NUM_LEGS], body_contact_any: bool, cfg: &RewardConfig) -> [f64; 2] {
    let n = feet.iter().filter(|&&f| f).count() as f64;
    let body = if body_contact_any { cfg.body_contact } else { 0.0 };
    [cfg.feet_contact * n, body]
}

/// Horizontal knee forces and clipped drift from the spawn point.
pub fn r_stability(
    knee_fxy: &[[f64; 2]; NUM_LEGS],
    p_current_xy: [f64; 2],
    p_init_xy: [f64; 2],
    cfg: &RewardConfig,
) -> [f64; 2] {
    let force: f64 = knee_fxy.iter().map(|f| f[0].hypot(f[1])).sum();
    let drift = (p_current_xy[0] - p_init_xy[0]).hypot(p_current_xy[1] - p_init_xy[1]);
    [cfg.knee_force * force, cfg.body_bias * drift.clamp(0.0, cfg.body_bias_clip)]
}

/// Joint-space quantities for the motion-constraint terms.
#[derive(Debug, Clone, Copy)]
pub struct MotionInputs<'a> {
    pub q: &'a [f64; NUM_JOINTS],
    pub qd: &'a [f64; NUM_JOINTS],
    pub qdd: &'a [f64; NUM_JOINTS],
    pub torque: &'a [f64; NUM_JOINTS],
    pub action: &'a [f64; NUM_JOINTS],
    pub prev_action: &'a [f64; NUM_JOINTS],
    pub lower: &'a [f64; NUM_JOINTS],
    pub upper: &'a [f64; NUM_JOINTS],
}

/// Position limits, joint speed limit, acceleration, velocity, action rate and torque.
pub fn r_motion(m: &MotionInputs<'_>, cfg: &RewardConfig) -> [f64; 6] {
    let violations = (0..NUM_JOINTS)
        .filter(|&j| m.q[j] > m.upper[j] || m.q[j] < m.lower[j])
        .count() as f64;
    let over: f64 = m.qd.iter().map(|v| (v.abs() - cfg.ang_vel_threshold).max(0.0)).sum();
    let sq = |v: &[f64; NUM_JOINTS]| v.iter().map(|x| x * x).sum::<f64>();
    let rate: f64 = m.action.iter().zip(m.prev_action).map(|(a, b)| (a - b).powi(2)).sum();
    [
        cfg.position_limits * violations,
        cfg.ang_vel_limit * over,
        cfg.joint_acc * sq(m.qdd),
        cfg.joint_vel * sq(m.qd),
        cfg.action_smooth * rate,
        cfg.torque * sq(m.torque),
    ]
}

/// Everything needed to score one control step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub gravity: [f64; 3],
    pub feet: &'a [bool; NUM_LEGS],
    pub body_contact_any: bool,
    pub knee_fxy: &'a [[f64; 2]; NUM_LEGS],
    pub p_current_xy: [f64; 2],
    pub p_init_xy: [f64; 2],
    pub motion: MotionInputs<'a>,
}

pub fn compute(inputs: &StepInputs<'_>, cfg: &RewardConfig, dt: f64) -> RewardBreakdown {
    let mut terms = [0.0; NUM_TERMS];
    terms[0..3].copy_from_slice(&r_orientation(&inputs.gravity, inputs.motion.q, cfg));
    terms[3..5].copy_from_slice(&r_contact(inputs.feet, inputs.body_contact_any, cfg));
    terms[5..7].copy_from_slice(&r_stability(
        inputs.knee_fxy,
        inputs.p_current_xy,
        inputs.p_init_xy,
        cfg,
    ));
    terms[7..13].copy_from_slice(&r_motion(&inputs.motion, cfg));
    if cfg.scale_by_dt {
        terms.iter_mut().for_each(|t| *t *= dt);
    }
    RewardBreakdown { terms }
}
