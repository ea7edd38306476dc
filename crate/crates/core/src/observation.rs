//! Network inputs: proprioception, history window, policy input and the
//! privileged critic state.
//!
//! | vector | layout | size |
//! |---|---|---|
//! | `o` | ω (3), g (3), q (12), q̇ (12), a_prev (12) | 42 |
//! | history | 5 frames of `o`, oldest first | 210 |
//! | `p` | o (42), m̂ (4), ĉ (13), ẑ (16) | 75 |
//! | `s` | o (42), scan (187), masses (4), kp (12), kd (12), com (2), body contacts (13), feet (4), friction (1) | 277 |

use std::collections::VecDeque;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::NUM_JOINTS;
use crate::sim::{ContactReport, SimState, NUM_BODIES};
use crate::terrain::Heightfield;

pub const OBS_DIM: usize = 42;
pub const HISTORY_LEN: usize = 5;
pub const HISTORY_DIM: usize = OBS_DIM * HISTORY_LEN;
pub const MASS_DIM: usize = 4;
pub const CONTACT_DIM: usize = NUM_BODIES;
pub const LATENT_DIM: usize = 16;
pub const POLICY_DIM: usize = OBS_DIM + MASS_DIM + CONTACT_DIM + LATENT_DIM;
pub const SCAN_NX: usize = 17;
pub const SCAN_NY: usize = 11;
pub const SCAN_DIM: usize = SCAN_NX * SCAN_NY;
pub const SCAN_SPACING: f64 = 0.1;
pub const SCAN_CLIP: f64 = 1.0;
pub const PRIVILEGED_DIM: usize =
    OBS_DIM + SCAN_DIM + MASS_DIM + 2 * NUM_JOINTS + 2 + CONTACT_DIM + 4 + 1;

/// Offsets of the `o` blocks.
pub mod obs_index {
    pub const ANG_VEL: usize = 0;
    pub const GRAVITY: usize = 3;
    pub const Q: usize = 6;
    pub const QD: usize = 18;
    pub const PREV_ACTION: usize = 30;
}

/// Offsets of the `s` blocks.
pub mod privileged_index {
    use super::*;
    pub const OBS: usize = 0;
    pub const SCAN: usize = OBS + OBS_DIM;
    pub const MASS: usize = SCAN + SCAN_DIM;
    pub const KP: usize = MASS + MASS_DIM;
    pub const KD: usize = KP + NUM_JOINTS;
    pub const COM: usize = KD + NUM_JOINTS;
    pub const CONTACT: usize = COM + 2;
    pub const FEET: usize = CONTACT + CONTACT_DIM;
    pub const FRICTION: usize = FEET + 4;
}

/// Proprioceptive observation from the simulator state.
pub fn build_o(state: &SimState, prev_action: &[f64; NUM_JOINTS]) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    let g = state.projected_gravity();
    o[obs_index::ANG_VEL..obs_index::ANG_VEL + 3].copy_from_slice(state.base_ang_vel.as_slice());
    o[obs_index::GRAVITY..obs_index::GRAVITY + 3].copy_from_slice(g.as_slice());
    o[obs_index::Q..obs_index::Q + NUM_JOINTS].copy_from_slice(&state.q);
    o[obs_index::QD..obs_index::QD + NUM_JOINTS].copy_from_slice(&state.qd);
    o[obs_index::PREV_ACTION..].copy_from_slice(prev_action);
    o
}

/// Uniform sensor noise added to `o` during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub ang_vel: f64,
    pub gravity: f64,
    pub q: f64,
    pub qd: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ang_vel: 0.2,
            gravity: 0.05,
            q: 0.01,
            qd: 1.5,
        }
    }
}

impl NoiseConfig {
    /// Perturbs `o` in place. The gravity block is renormalized to unit length.
    pub fn apply<R: Rng + ?Sized>(&self, o: &mut [f64; OBS_DIM], rng: &mut R) {
        if !self.enabled {
            return;
        }
        let mut jitter = |slice: &mut [f64], amp: f64| {
            if amp > 0.0 {
                for x in slice {
                    *x += rng.gen_range(-amp..=amp);
                }
            }
        };
        jitter(&mut o[obs_index::ANG_VEL..obs_index::GRAVITY], self.ang_vel);
        jitter(&mut o[obs_index::GRAVITY..obs_index::Q], self.gravity);
        jitter(&mut o[obs_index::Q..obs_index::QD], self.q);
        jitter(&mut o[obs_index::QD..obs_index::PREV_ACTION], self.qd);
        let g = Vector3::new(o[3], o[4], o[5]);
        let n = g.norm();
        if n > 1e-9 {
            for k in 0..3 {
                o[3 + k] /= n;
            }
        }
    }
}

/// FIFO window of the last [`HISTORY_LEN`] observations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    frames: VecDeque<[f64; OBS_DIM]>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Appends `o`; the first push of an episode fills the whole window with it.
    pub fn push(&mut self, o: &[f64; OBS_DIM]) {
        if self.frames.is_empty() {
            self.frames.extend(std::iter::repeat(*o).take(HISTORY_LEN));
            return;
        }
        if self.frames.len() == HISTORY_LEN {
            self.frames.pop_front();
        }
        self.frames.push_back(*o);
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64; OBS_DIM]> {
        self.frames.iter()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Row-major 5×42 flattening, oldest frame first.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.iter().copied()).collect()
    }
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// `p = [o, m̂, ĉ, ẑ]`.
pub fn build_p(o: &[f64], mass: &[f64], contact: &[f64], latent: &[f64]) -> Result<Vec<f64>> {
    check("o", OBS_DIM, o.len())?;
    check("mass estimate", MASS_DIM, mass.len())?;
    check("contact estimate", CONTACT_DIM, contact.len())?;
    check("latent", LATENT_DIM, latent.len())?;
    let mut p = Vec::with_capacity(POLICY_DIM);
    p.extend_from_slice(o);
    p.extend_from_slice(mass);
    p.extend_from_slice(contact);
    p.extend_from_slice(latent);
    Ok(p)
}

/// World positions of the scan points: a 17×11 grid (x-major) centered on
/// the base and aligned with its heading.
pub fn scan_points(base_pos: &Vector3<f64>, base_quat: &UnitQuaternion<f64>) -> Vec<[f64; 2]> {
    let fwd = base_quat * Vector3::x();
    let yaw = fwd.y.atan2(fwd.x);
    let (sy, cy) = yaw.sin_cos();
    let mut out = Vec::with_capacity(SCAN_DIM);
    for i in 0..SCAN_NX {
        let dx = (i as f64 - (SCAN_NX / 2) as f64) * SCAN_SPACING;
        for j in 0..SCAN_NY {
            let dy = (j as f64 - (SCAN_NY / 2) as f64) * SCAN_SPACING;
            out.push([base_pos.x + cy * dx - sy * dy, base_pos.y + sy * dx + cy * dy]);
        }
    }
    out
}

/// Base height minus terrain height at each scan point, clipped to ±1 m.
pub fn height_scan(
    terrain: &Heightfield,
    base_pos: &Vector3<f64>,
    base_quat: &UnitQuaternion<f64>,
) -> Vec<f64> {
    scan_points(base_pos, base_quat)
        .into_iter()
        .map(|[x, y]| (base_pos.z - terrain.height_at(x, y)).clamp(-SCAN_CLIP, SCAN_CLIP))
        .collect()
}

/// Privileged inputs besides `o` and the scan.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedInfo<'a> {
    pub masses: &'a [f64],
    pub kp: &'a [f64],
    pub kd: &'a [f64],
    pub com_shift: &'a [f64],
    pub contacts: &'a ContactReport,
    pub friction: f64,
}

/// `s = [o, h, m, k_PD, p_com, c_t, c_f, μ]`.
pub fn build_s(o: &[f64], scan: &[f64], info: &PrivilegedInfo<'_>) -> Result<Vec<f64>> {
    check("o", OBS_DIM, o.len())?;
    check("height scan", SCAN_DIM, scan.len())?;
    check("mass vector", MASS_DIM, info.masses.len())?;
    check("kp", NUM_JOINTS, info.kp.len())?;
    check("kd", NUM_JOINTS, info.kd.len())?;
    check("com shift", 2, info.com_shift.len())?;
    let flag = |b: &bool| if *b { 1.0 } else { 0.0 };
    let mut s = Vec::with_capacity(PRIVILEGED_DIM);
    s.extend_from_slice(o);
    s.extend_from_slice(scan);
    s.extend_from_slice(info.masses);
    s.extend_from_slice(info.kp);
    s.extend_from_slice(info.kd);
    s.extend_from_slice(info.com_shift);
    s.extend(info.contacts.body_contact.iter().map(flag));
    s.extend(info.contacts.foot_contact.iter().map(flag));
    s.push(info.friction);
    check("privileged state", PRIVILEGED_DIM, s.len())?;
    Ok(s)
}

/// Human-readable names of the `o` entries.
pub fn obs_labels() -> Vec<String> {
    let mut out: Vec<String> = ["wx", "wy", "wz", "gx", "gy", "gz"].iter().map(|s| s.to_string()).collect();
    for prefix in ["q", "qd", "a_prev"] {
        out.extend(joint_names().iter().map(|j| format!("{prefix}_{j}")));
    }
    out
}

/// Human-readable names of the `s` entries.
pub fn privileged_labels() -> Vec<String> {
    let mut out = obs_labels();
    for i in 0..SCAN_NX {
        for j in 0..SCAN_NY {
            out.push(format!("scan_{i}_{j}"));
        }
    }
    out.extend(["m_base", "m_hip", "m_thigh", "m_calf"].iter().map(|s| s.to_string()));
    for prefix in ["kp", "kd"] {
        out.extend(joint_names().iter().map(|j| format!("{prefix}_{j}")));
    }
    out.push("com_x".into());
    out.push("com_y".into());
    out.extend(component_names().iter().map(|c| format!("contact_{c}")));
    out.extend(["FL", "FR", "RL", "RR"].iter().map(|l| format!("foot_{l}")));
    out.push("friction".into());
    out
}

pub fn joint_names() -> Vec<String> {
    let mut out = Vec::with_capacity(NUM_JOINTS);
    for leg in ["FL", "FR", "RL", "RR"] {
        for j in ["hip", "thigh", "calf"] {
            out.push(format!("{leg}_{j}"));
        }
    }
    out
}

/// Contact component names in report order.
pub fn component_names() -> Vec<String> {
    let mut out = vec!["base".to_string()];
    for part in ["hip", "thigh", "calf"] {
        for leg in ["FL", "FR", "RL", "RR"] {
            out.push(format!("{part}_{leg}"));
        }
    }
    out
}

/// Everything the networks see at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub o: [f64; OBS_DIM],
    pub history: Vec<f64>,
    pub p: Vec<f64>,
    pub s: Vec<f64>,
}

impl ObservationBundle {
    pub fn check_dims(&self) -> Result<()> {
        check("o", OBS_DIM, self.o.len())?;
        check("history", HISTORY_DIM, self.history.len())?;
        check("p", POLICY_DIM, self.p.len())?;
        check("s", PRIVILEGED_DIM, self.s.len())?;
        if self.p.iter().chain(&self.s).chain(&self.history).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }
}

/// Running per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub frozen: bool,
    pub eps: f64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
            frozen: false,
            eps: 1e-8,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merges a batch of rows (each `dim` long) into the running statistics.
    /// No-op when frozen.
    pub fn update(&mut self, rows: &[f64]) {
        let d = self.dim();
        if self.frozen || rows.is_empty() {
            return;
        }
        assert_eq!(rows.len() % d, 0, "batch is not a whole number of rows");
        let n = (rows.len() / d) as f64;
        let mut bmean = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for (m, x) in bmean.iter_mut().zip(row) {
                *m += x;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bvar = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for k in 0..d {
                let e = row[k] - bmean[k];
                bvar[k] += e * e;
            }
        }
        bvar.iter_mut().for_each(|v| *v /= n);
        if self.count == 0.0 {
            self.mean = bmean;
            self.var = bvar;
            self.count = n;
            return;
        }
        let total = self.count + n;
        for k in 0..d {
            let delta = bmean[k] - self.mean[k];
            let m2 = self.var[k] * self.count + bvar[k] * n + delta * delta * self.count * n / total;
            self.mean[k] += delta * n / total;
            self.var[k] = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = (x[k] - self.mean[k]) / (self.var[k] + self.eps).sqrt();
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }

    /// Rounds the statistics to single precision, the checkpoint storage format.
    pub fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.var.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}
