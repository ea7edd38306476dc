//! Reduced-fidelity quadruped simulator.
//!
//! A floating trunk with twelve revolute joints, stepped with semi-implicit
//! Euler. Contacts are penalty springs against the heightfield with a
//! Coulomb cap on tangential force. Stiff terms (contact springs and
//! dampers, PD gains, joint damping) are integrated linearly implicitly so
//! light links stay stable at the default substep; a small active-set loop
//! resolves contact separation, stick/slip and torque saturation.

mod dynamics;
pub mod model;

use std::sync::Arc;

use nalgebra::{SMatrix, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dynamics::{Kinematics, MatN, VecN, NDOF};
pub use model::{joint_body, CollisionPoint, PointKind, RobotModel, NUM_BODIES};

use crate::error::{Error, Result};
use crate::morphology::{ControlRandomization, MorphologySpec, NUM_JOINTS, NUM_LEGS};
use crate::terrain::Heightfield;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt_physics: f64,
    pub gravity: f64,
    /// Normal penalty stiffness per contact point, N/m.
    pub contact_stiffness: f64,
    /// Normal penalty damping per contact point, N·s/m.
    pub contact_damping: f64,
    /// Tangential damping used while sticking, N·s/m.
    pub friction_damping: f64,
    /// Reflected rotor inertia added to every joint, kg·m².
    pub joint_armature: f64,
    /// Joint-limit stop stiffness, N·m/rad.
    pub limit_stiffness: f64,
    pub limit_damping: f64,
    pub foot_radius: f64,
    pub hip_radius: f64,
    pub reset_roll_jitter: f64,
    pub reset_drop_height: f64,
    /// Minimum settling time after the drop, s.
    pub reset_burn_in: f64,
    /// Settling continues until the robot is nearly still or this time passes.
    pub reset_max_burn_in: f64,
    pub max_solver_iterations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_physics: 0.005,
            gravity: 9.81,
            contact_stiffness: 5.0e5,
            contact_damping: 2.0e3,
            friction_damping: 5.0e3,
            joint_armature: 0.01,
            limit_stiffness: 200.0,
            limit_damping: 2.0,
            foot_radius: 0.02,
            hip_radius: 0.04,
            reset_roll_jitter: 0.3,
            reset_drop_height: 0.05,
            reset_burn_in: 0.5,
            reset_max_burn_in: 2.0,
            max_solver_iterations: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub base_pos: Vector3<f64>,
    /// World-from-trunk rotation.
    pub base_quat: UnitQuaternion<f64>,
    /// Trunk-frame angular velocity, rad/s.
    pub base_ang_vel: Vector3<f64>,
    /// Trunk-frame velocity of the trunk origin, m/s.
    pub base_lin_vel: Vector3<f64>,
    pub q: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub time: f64,
}

impl SimState {
    pub fn nu(&self) -> VecN {
        let mut nu = VecN::zeros();
        nu.fixed_rows_mut::<3>(0).copy_from(&self.base_ang_vel);
        nu.fixed_rows_mut::<3>(3).copy_from(&self.base_lin_vel);
        for j in 0..NUM_JOINTS {
            nu[6 + j] = self.qd[j];
        }
        nu
    }

    fn set_nu(&mut self, nu: &VecN) {
        self.base_ang_vel = nu.fixed_rows::<3>(0).into_owned();
        self.base_lin_vel = nu.fixed_rows::<3>(3).into_owned();
        for j in 0..NUM_JOINTS {
            self.qd[j] = nu[6 + j];
        }
    }

    pub fn world_lin_vel(&self) -> Vector3<f64> {
        self.base_quat * self.base_lin_vel
    }

    /// Gravity direction expressed in the trunk frame.
    pub fn projected_gravity(&self) -> Vector3<f64> {
        self.base_quat.inverse() * Vector3::new(0.0, 0.0, -1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.base_pos.iter().all(|x| x.is_finite())
            && self.base_quat.coords.iter().all(|x| x.is_finite())
            && self.base_ang_vel.iter().all(|x| x.is_finite())
            && self.base_lin_vel.iter().all(|x| x.is_finite())
            && self.q.iter().all(|x| x.is_finite())
            && self.qd.iter().all(|x| x.is_finite())
    }
}

/// Contact summary for one control step (or one instant).
///
/// Component flags follow body order `[base, hip×4, thigh×4, calf×4]`; the
/// calf flag covers the calf link only, foot-sphere contact is reported in
/// `foot_contact`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactReport {
    pub body_contact: [bool; NUM_BODIES],
    pub foot_contact: [bool; NUM_LEGS],
    /// Foot normal force, N.
    pub foot_force: [f64; NUM_LEGS],
    /// World-horizontal contact force on each calf link (foot excluded), N.
    pub knee_force_xy: [[f64; 2]; NUM_LEGS],
    /// Mean PD torque applied over the control step, N·m.
    pub torque: [f64; NUM_JOINTS],
    /// Largest penetration depth seen, m.
    pub max_penetration: f64,
}

impl ContactReport {
    pub fn any_body_contact(&self) -> bool {
        self.body_contact.iter().any(|&c| c)
    }

    pub fn total_foot_force(&self) -> f64 {
        self.foot_force.iter().sum()
    }
}

/// `clamp(strength · (kp (q* − q) − kd q̇), ±limit)` per joint.
pub fn pd_torque(
    kp: &[f64; NUM_JOINTS],
    kd: &[f64; NUM_JOINTS],
    q_target: &[f64; NUM_JOINTS],
    q: &[f64; NUM_JOINTS],
    qd: &[f64; NUM_JOINTS],
    strength: &[f64; NUM_JOINTS],
    torque_limit: f64,
) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| {
        (strength[j] * (kp[j] * (q_target[j] - q[j]) - kd[j] * qd[j]))
            .clamp(-torque_limit, torque_limit)
    })
}

const MAX_FLIPS: u8 = 3;

#[derive(Debug, Clone, Copy)]
enum Friction {
    Off,
    Stick,
    Slide { dir: Vector3<f64>, normal: f64 },
}

struct Candidate {
    point: usize,
    normal: Vector3<f64>,
    depth: f64,
    jac: SMatrix<f64, 3, NDOF>,
    jn: VecN,
    mode: Friction,
    force: Vector3<f64>,
    normal_force: f64,
    /// Mode changes within the current substep; frozen after a few to stop cycling.
    flips: u8,
}

impl Candidate {
    /// Normal damping acts only once the point actually penetrates.
    fn damping(&self, c: f64) -> f64 {
        if self.depth > 0.0 {
            c
        } else {
            0.0
        }
    }
}

/// One robot on one terrain.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub model: RobotModel,
    pub control: ControlRandomization,
    pub config: SimConfig,
    pub terrain: Arc<Heightfield>,
}

impl Simulator {
    pub fn new(
        morph: &MorphologySpec,
        control: &ControlRandomization,
        config: &SimConfig,
        terrain: Arc<Heightfield>,
    ) -> Self {
        Self {
            model: RobotModel::new(morph, control, config),
            control: control.clone(),
            config: config.clone(),
            terrain,
        }
    }

    pub fn kinematics(&self, state: &SimState) -> Kinematics {
        Kinematics::new(
            &self.model,
            &state.base_pos,
            &state.base_quat,
            &state.q,
            &state.nu(),
        )
    }

    /// Points touching the terrain. With `lookahead` set, points that would
    /// reach it within that time at their current approach speed are
    /// included too (with negative depth).
    fn candidates(&self, kin: &Kinematics, lookahead: Option<f64>) -> Vec<Candidate> {
        let mut out = Vec::new();
        for (i, pt) in self.model.points.iter().enumerate() {
            let x = kin.point_world(pt.body, &pt.local);
            let (h, [gx, gy]) = self.terrain.height_and_gradient(x.x, x.y);
            let n = Vector3::new(-gx, -gy, 1.0).normalize();
            let dist = (x.z - h) * n.z - pt.radius;
            let reach = match lookahead {
                Some(t) if dist >= 0.0 => {
                    let vn = n.dot(&kin.point_velocity(pt.body, &x));
                    dist + 1.5 * t * vn.min(0.0)
                }
                _ => dist,
            };
            if reach < 0.0 {
                let cp = x - n * pt.radius;
                let jac = kin.point_jacobian(&self.model, pt.body, &cp);
                let jn = jac.transpose() * n;
                out.push(Candidate {
                    point: i,
                    normal: n,
                    depth: -dist,
                    jac,
                    jn,
                    mode: Friction::Stick,
                    force: Vector3::zeros(),
                    normal_force: 0.0,
                    flips: 0,
                });
            }
        }
        out
    }

    /// Instantaneous contact report from explicit penalty forces.
    pub fn contact_report(&self, state: &SimState) -> ContactReport {
        let kin = self.kinematics(state);
        let nu = state.nu();
        let cfg = &self.config;
        let mut report = ContactReport::default();
        for c in self.candidates(&kin, None) {
            let v = c.jac * nu;
            let vn = c.normal.dot(&v);
            let fn_ = (cfg.contact_stiffness * c.depth - cfg.contact_damping * vn).max(0.0);
            let vt = v - c.normal * vn;
            let ft_mag = (cfg.friction_damping * vt.norm()).min(self.control.ground_friction * fn_);
            let ft = if vt.norm() > 1e-12 { -vt.normalize() * ft_mag } else { Vector3::zeros() };
            let mut cand = c;
            cand.normal_force = fn_;
            cand.force = cand.normal * fn_ + ft;
            self.accumulate(&cand, &mut report, 1.0);
        }
        report
    }

    fn accumulate(&self, c: &Candidate, report: &mut ContactReport, weight: f64) {
        if c.normal_force <= 0.0 {
            return;
        }
        let pt = &self.model.points[c.point];
        report.max_penetration = report.max_penetration.max(c.depth);
        match pt.kind {
            PointKind::Foot => {
                report.foot_contact[pt.leg] = true;
                report.foot_force[pt.leg] += weight * c.normal_force;
            }
            kind => {
                report.body_contact[pt.body] = true;
                if kind == PointKind::Knee {
                    report.knee_force_xy[pt.leg][0] += weight * c.force.x;
                    report.knee_force_xy[pt.leg][1] += weight * c.force.y;
                }
            }
        }
    }

    /// Advances one physics substep in place; returns applied PD torques.
    fn substep(
        &self,
        state: &mut SimState,
        q_target: &[f64; NUM_JOINTS],
        report: &mut ContactReport,
        weight: f64,
    ) -> Result<[f64; NUM_JOINTS]> {
        let cfg = &self.config;
        let ctl = &self.control;
        let dt = cfg.dt_physics;
        let nu = state.nu();
        let kin = Kinematics::new(&self.model, &state.base_pos, &state.base_quat, &state.q, &nu);
        let mass = kin.mass_matrix(&self.model);
        let bias = kin.bias_forces(&self.model, &nu, cfg.gravity);

        let mut base_a = mass;
        let mut base_rhs = mass * nu - bias * dt;

        // Joint damping and limit stops are always implicit.
        for j in 0..NUM_JOINTS {
            let i = 6 + j;
            base_a[(i, i)] += dt * ctl.motor_friction[j];
            let (lo, hi) = (self.model.lower[j], self.model.upper[j]);
            let over = if state.q[j] > hi {
                state.q[j] - hi
            } else if state.q[j] < lo {
                state.q[j] - lo
            } else {
                0.0
            };
            if over != 0.0 {
                base_a[(i, i)] += dt * (cfg.limit_stiffness * dt + cfg.limit_damping);
                base_rhs[i] -= dt * cfg.limit_stiffness * over;
            }
        }

        let limit = self.model.torque_limit;
        let explicit = pd_torque(
            &ctl.kp,
            &ctl.kd,
            q_target,
            &state.q,
            &state.qd,
            &ctl.motor_strength,
            f64::INFINITY,
        );
        let mut saturated: [Option<f64>; NUM_JOINTS] = std::array::from_fn(|j| {
            (explicit[j].abs() >= limit).then(|| explicit[j].clamp(-limit, limit))
        });

        let mut contacts = self.candidates(&kin, Some(dt));
        let (k, c, ct) = (cfg.contact_stiffness, cfg.contact_damping, cfg.friction_damping);
        let mu = ctl.ground_friction;
        for cand in contacts.iter_mut() {
            let v = cand.jac * nu;
            let vn = cand.normal.dot(&v);
            let fn0 = (k * cand.depth - cand.damping(c) * vn).max(0.0);
            let vt = v - cand.normal * vn;
            if ct * vt.norm() > mu * fn0 {
                let dir = if vt.norm() > 1e-12 { vt.normalize() } else { Vector3::zeros() };
                cand.mode = Friction::Slide { dir, normal: fn0 };
            }
        }

        let mut nu_new = nu;
        for _ in 0..cfg.max_solver_iterations.max(1) {
            let mut a = base_a;
            let mut rhs = base_rhs;
            for j in 0..NUM_JOINTS {
                let i = 6 + j;
                match saturated[j] {
                    Some(tau) => rhs[i] += dt * tau,
                    None => {
                        let s = ctl.motor_strength[j];
                        a[(i, i)] += dt * s * (ctl.kp[j] * dt + ctl.kd[j]);
                        rhs[i] += dt * s * ctl.kp[j] * (q_target[j] - state.q[j]);
                    }
                }
            }
            for cand in contacts.iter() {
                if matches!(cand.mode, Friction::Off) {
                    continue;
                }
                let w = dt * (k * dt + cand.damping(c));
                a += (cand.jn * cand.jn.transpose()) * w;
                rhs += cand.jn * (dt * k * cand.depth);
                match cand.mode {
                    Friction::Stick => {
                        let proj = SMatrix::<f64, 3, 3>::identity()
                            - cand.normal * cand.normal.transpose();
                        a += cand.jac.transpose() * proj * cand.jac * (dt * ct);
                    }
                    Friction::Slide { dir, normal } => {
                        rhs -= cand.jac.transpose() * dir * (dt * mu * normal);
                    }
                    Friction::Off => {}
                }
            }
            let chol = a.cholesky().ok_or_else(|| Error::SimulationFault {
                time: state.time,
                reason: "system matrix not positive definite".into(),
            })?;
            nu_new = chol.solve(&rhs);

            let mut changed = false;
            for cand in contacts.iter_mut() {
                let v = cand.jac * nu_new;
                let vn = cand.normal.dot(&v);
                let fn_ = k * (cand.depth - dt * vn) - cand.damping(c) * vn;
                let frozen = cand.flips >= MAX_FLIPS;
                if matches!(cand.mode, Friction::Off) {
                    if fn_ > 0.0 && !frozen {
                        cand.mode = Friction::Stick;
                        cand.flips += 1;
                        changed = true;
                    }
                    continue;
                }
                if fn_ < 0.0 && !frozen {
                    cand.flips += 1;
                    cand.mode = Friction::Off;
                    cand.normal_force = 0.0;
                    cand.force = Vector3::zeros();
                    changed = true;
                    continue;
                }
                let vt = v - cand.normal * vn;
                match cand.mode {
                    Friction::Stick => {
                        let ft = -vt * ct;
                        if ft.norm() > mu * fn_.max(0.0) * (1.0 + 1e-9) + 1e-9 && !frozen {
                            cand.flips += 1;
                            let dir = if vt.norm() > 1e-12 { vt.normalize() } else { Vector3::zeros() };
                            cand.mode = Friction::Slide { dir, normal: fn_ };
                            changed = true;
                        } else {
                            cand.force = cand.normal * fn_ + ft;
                        }
                    }
                    Friction::Slide { dir, normal } => {
                        if vt.dot(&dir) <= 0.0 && !frozen {
                            // Friction would reverse the slip: the point sticks.
                            cand.flips += 1;
                            cand.mode = Friction::Stick;
                            changed = true;
                        } else if (fn_ - normal).abs() > 1e-6 * (1.0 + fn_) {
                            cand.mode = Friction::Slide { dir, normal: fn_.max(0.0) };
                            changed = true;
                        }
                        cand.force = cand.normal * fn_ - dir * (mu * normal);
                    }
                    Friction::Off => {}
                }
                cand.normal_force = fn_;
            }
            for j in 0..NUM_JOINTS {
                if saturated[j].is_none() {
                    let s = ctl.motor_strength[j];
                    let qd = nu_new[6 + j];
                    let tau = s * (ctl.kp[j] * (q_target[j] - state.q[j] - dt * qd) - ctl.kd[j] * qd);
                    if tau.abs() > limit {
                        saturated[j] = Some(tau.clamp(-limit, limit));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let torque: [f64; NUM_JOINTS] = std::array::from_fn(|j| match saturated[j] {
            Some(t) => t,
            None => {
                let s = ctl.motor_strength[j];
                let qd = nu_new[6 + j];
                s * (ctl.kp[j] * (q_target[j] - state.q[j] - dt * qd) - ctl.kd[j] * qd)
            }
        });

        for cand in &contacts {
            if !matches!(cand.mode, Friction::Off) {
                self.accumulate(cand, report, weight);
            }
        }

        // Semi-implicit position update with the new velocities.
        let rot = state.base_quat;
        state.set_nu(&nu_new);
        state.base_pos += rot * state.base_lin_vel * dt;
        let dq = UnitQuaternion::from_scaled_axis(state.base_ang_vel * dt);
        state.base_quat = UnitQuaternion::new_normalize((rot * dq).into_inner());
        for j in 0..NUM_JOINTS {
            state.q[j] += dt * state.qd[j];
        }
        state.time += dt;
        if !state.is_finite() {
            return Err(Error::SimulationFault {
                time: state.time,
                reason: "non-finite state".into(),
            });
        }
        Ok(torque)
    }

    pub fn substeps(&self, dt_control: f64) -> usize {
        ((dt_control / self.config.dt_physics).round() as usize).max(1)
    }

    /// Advances one control period, recomputing PD torques every substep.
    /// Forces in the report are substep means, flags are OR-ed.
    pub fn step_control(
        &self,
        state: &SimState,
        q_target: &[f64; NUM_JOINTS],
        dt_control: f64,
    ) -> Result<(SimState, ContactReport)> {
        let n = self.substeps(dt_control);
        let weight = 1.0 / n as f64;
        let mut next = state.clone();
        let mut report = ContactReport::default();
        for _ in 0..n {
            let tau = self.substep(&mut next, q_target, &mut report, weight)?;
            for j in 0..NUM_JOINTS {
                report.torque[j] += weight * tau[j];
            }
        }
        Ok((next, report))
    }

    /// Lowest clearance between any collision sphere and the terrain.
    pub fn min_clearance(&self, state: &SimState) -> f64 {
        let kin = self.kinematics(state);
        self.model
            .points
            .iter()
            .map(|pt| {
                let x = kin.point_world(pt.body, &pt.local);
                x.z - pt.radius - self.terrain.max_height_near(x.x, x.y, pt.radius)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Trunk-center height when standing level on flat ground at pose `q`.
    pub fn standing_height(&self, q: &[f64; NUM_JOINTS]) -> f64 {
        let s = SimState {
            base_pos: Vector3::zeros(),
            base_quat: UnitQuaternion::identity(),
            base_ang_vel: Vector3::zeros(),
            base_lin_vel: Vector3::zeros(),
            q: *q,
            qd: [0.0; NUM_JOINTS],
            time: 0.0,
        };
        let kin = self.kinematics(&s);
        -self
            .model
            .points
            .iter()
            .map(|pt| kin.point_world(pt.body, &pt.local).z - pt.radius)
            .fold(f64::INFINITY, f64::min)
    }

    /// Trunk-center height above the terrain directly below it.
    pub fn base_height(&self, state: &SimState) -> f64 {
        state.base_pos.z - self.terrain.height_at(state.base_pos.x, state.base_pos.y)
    }

    /// Static pose at `q` with the lowest collision point `clearance` above the terrain.
    pub fn place(
        &self,
        xy: [f64; 2],
        quat: UnitQuaternion<f64>,
        q: [f64; NUM_JOINTS],
        clearance: f64,
    ) -> SimState {
        let mut s = SimState {
            base_pos: Vector3::new(xy[0], xy[1], 0.0),
            base_quat: quat,
            base_ang_vel: Vector3::zeros(),
            base_lin_vel: Vector3::zeros(),
            q,
            qd: [0.0; NUM_JOINTS],
            time: 0.0,
        };
        let current = self.min_clearance(&s);
        s.base_pos.z += clearance - current;
        s
    }

    /// Random supine pose dropped above the spawn point and allowed to settle.
    pub fn reset_supine<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimState> {
        let cfg = &self.config;
        let dt_burn = 0.02;
        let steps = (cfg.reset_burn_in / dt_burn).round() as usize;
        let max_steps = ((cfg.reset_max_burn_in / dt_burn).round() as usize).max(steps);
        let mut last = None;
        for _ in 0..20 {
            let roll = std::f64::consts::PI + rng.gen_range(-cfg.reset_roll_jitter..=cfg.reset_roll_jitter);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let q: [f64; NUM_JOINTS] =
                std::array::from_fn(|j| rng.gen_range(self.model.lower[j]..=self.model.upper[j]));
            let quat = UnitQuaternion::from_euler_angles(roll, 0.0, yaw);
            let mut s = self.place(self.terrain.spawn, quat, q, cfg.reset_drop_height);
            for k in 0..max_steps {
                s = self.step_control(&s, &q, dt_burn)?.0;
                if k + 1 >= steps && is_settled(&s) {
                    break;
                }
            }
            s.time = 0.0;
            if s.projected_gravity().z > 0.7 {
                return Ok(s);
            }
            last = Some(s);
        }
        Ok(last.expect("at least one attempt"))
    }
}

fn is_settled(s: &SimState) -> bool {
    s.base_lin_vel.norm() < 0.05
        && s.base_ang_vel.norm() < 0.2
        && s.qd.iter().all(|v| v.abs() < 0.5)
}

#[cfg(test)]
mod tests;
