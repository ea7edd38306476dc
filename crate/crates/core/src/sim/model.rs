//! Rigid-body tree built from a [`MorphologySpec`].
//!
//! Body order: trunk, four hips, four thighs, four calves; legs ordered
//! FL, FR, RL, RR. This is also the order of the 13 contact components.
//! Joint `3 * leg + k` drives hip (k = 0, axis x), thigh (k = 1, axis y) or
//! calf (k = 2, axis y).

use nalgebra::{Matrix3, Vector3};

use super::SimConfig;
use crate::morphology::{ControlRandomization, MorphologySpec, NUM_JOINTS, NUM_LEGS};

pub const NUM_BODIES: usize = 13;
pub const TRUNK: usize = 0;

/// Signs of the hip mount position for FL, FR, RL, RR.
pub const LEG_SIGNS: [[f64; 2]; NUM_LEGS] = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Trunk,
    Hip,
    Thigh,
    /// Calf-link sphere other than the foot; carries "knee" forces.
    Knee,
    Foot,
}

#[derive(Debug, Clone, Copy)]
pub struct CollisionPoint {
    pub body: usize,
    pub local: Vector3<f64>,
    pub radius: f64,
    pub kind: PointKind,
    pub leg: usize,
}

#[derive(Debug, Clone)]
pub struct Body {
    pub parent: usize,
    /// Joint origin in the parent frame (unused for the trunk).
    pub offset: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    /// Rotational inertia about the COM, body frame.
    pub inertia: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    pub bodies: Vec<Body>,
    pub points: Vec<CollisionPoint>,
    pub lower: [f64; NUM_JOINTS],
    pub upper: [f64; NUM_JOINTS],
    pub torque_limit: f64,
    pub armature: f64,
    pub total_mass: f64,
    pub foot_radius: f64,
}

/// Body driven by joint `j`.
pub const fn joint_body(j: usize) -> usize {
    let leg = j / 3;
    let k = j % 3;
    1 + 4 * k + leg
}

/// Joint driving body `b` (b >= 1).
pub const fn body_joint(b: usize) -> usize {
    let leg = (b - 1) % 4;
    let k = (b - 1) / 4;
    3 * leg + k
}

fn box_inertia(m: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(
        m / 12.0 * (y * y + z * z),
        m / 12.0 * (x * x + z * z),
        m / 12.0 * (x * x + y * y),
    ))
}

impl RobotModel {
    pub fn new(
        morph: &MorphologySpec,
        control: &ControlRandomization,
        config: &SimConfig,
    ) -> Self {
        let m = morph;
        let (l, w, h) = (m.trunk_length, m.trunk_width, m.trunk_height);
        let trunk_mass = m.trunk_mass + control.payload;
        let mut bodies = Vec::with_capacity(NUM_BODIES);
        bodies.push(Body {
            parent: usize::MAX,
            offset: Vector3::zeros(),
            axis: Vector3::zeros(),
            mass: trunk_mass,
            com: Vector3::new(control.com_shift[0], control.com_shift[1], 0.0),
            inertia: box_inertia(trunk_mass, l, w, h),
        });
        let hip_r = config.hip_radius;
        for [sx, sy] in LEG_SIGNS {
            bodies.push(Body {
                parent: TRUNK,
                offset: Vector3::new(sx * 0.5 * l, sy * 0.5 * w, 0.0),
                axis: Vector3::x(),
                mass: m.hip_mass,
                com: Vector3::new(0.0, sy * 0.5 * m.hip_length, 0.0),
                inertia: Matrix3::identity() * (0.4 * m.hip_mass * hip_r * hip_r),
            });
        }
        for (leg, [_, sy]) in LEG_SIGNS.iter().enumerate() {
            bodies.push(Body {
                parent: 1 + leg,
                offset: Vector3::new(0.0, sy * m.hip_length, 0.0),
                axis: Vector3::y(),
                mass: m.thigh_mass,
                com: Vector3::new(0.0, 0.0, -0.5 * m.thigh_length),
                inertia: box_inertia(m.thigh_mass, m.thigh_width, m.thigh_height, m.thigh_length),
            });
        }
        for leg in 0..NUM_LEGS {
            bodies.push(Body {
                parent: 5 + leg,
                offset: Vector3::new(0.0, 0.0, -m.thigh_length),
                axis: Vector3::y(),
                mass: m.calf_mass,
                com: Vector3::new(0.0, 0.0, -0.5 * m.calf_length),
                inertia: box_inertia(m.calf_mass, m.calf_width, m.calf_height, m.calf_length),
            });
        }

        let mut points = Vec::new();
        for x in [-0.5 * l, 0.5 * l] {
            for y in [-0.5 * w, 0.5 * w] {
                for z in [-0.5 * h, 0.5 * h] {
                    points.push((Vector3::new(x, y, z), 0.0));
                }
            }
        }
        for p in [
            Vector3::new(0.0, 0.0, 0.5 * h),
            Vector3::new(0.0, 0.0, -0.5 * h),
            Vector3::new(0.0, 0.5 * w, 0.0),
            Vector3::new(0.0, -0.5 * w, 0.0),
            Vector3::new(0.5 * l, 0.0, 0.0),
            Vector3::new(-0.5 * l, 0.0, 0.0),
            Vector3::new(0.0, 0.5 * w, 0.5 * h),
            Vector3::new(0.0, -0.5 * w, 0.5 * h),
            Vector3::new(0.0, 0.5 * w, -0.5 * h),
            Vector3::new(0.0, -0.5 * w, -0.5 * h),
        ] {
            points.push((p, 0.0));
        }
        let mut collision: Vec<CollisionPoint> = points
            .into_iter()
            .map(|(local, radius)| CollisionPoint {
                body: TRUNK,
                local,
                radius,
                kind: PointKind::Trunk,
                leg: 0,
            })
            .collect();
        let thigh_r = 0.5 * m.thigh_width.max(m.thigh_height);
        let calf_r = 0.5 * m.calf_width.max(m.calf_height);
        for (leg, [_, sy]) in LEG_SIGNS.iter().enumerate() {
            collision.push(CollisionPoint {
                body: 1 + leg,
                local: Vector3::new(0.0, sy * 0.5 * m.hip_length, 0.0),
                radius: hip_r,
                kind: PointKind::Hip,
                leg,
            });
            collision.push(CollisionPoint {
                body: 5 + leg,
                local: Vector3::new(0.0, 0.0, -0.5 * m.thigh_length),
                radius: thigh_r,
                kind: PointKind::Thigh,
                leg,
            });
            for frac in [0.0, 0.5] {
                collision.push(CollisionPoint {
                    body: 9 + leg,
                    local: Vector3::new(0.0, 0.0, -frac * m.calf_length),
                    radius: calf_r,
                    kind: PointKind::Knee,
                    leg,
                });
            }
            collision.push(CollisionPoint {
                body: 9 + leg,
                local: Vector3::new(0.0, 0.0, -m.calf_length),
                radius: config.foot_radius,
                kind: PointKind::Foot,
                leg,
            });
        }

        let total_mass = bodies.iter().map(|b| b.mass).sum();
        Self {
            bodies,
            points: collision,
            lower: m.joint_limits_lower,
            upper: m.joint_limits_upper,
            torque_limit: m.torque_limit,
            armature: config.joint_armature,
            total_mass,
            foot_radius: config.foot_radius,
        }
    }

    /// Foot position in the trunk frame for one leg at joint angles `[hip, thigh, calf]`.
    pub fn foot_in_trunk(&self, leg: usize, angles: [f64; 3]) -> Vector3<f64> {
        let hip = &self.bodies[1 + leg];
        let thigh = &self.bodies[5 + leg];
        let calf = &self.bodies[9 + leg];
        let r_hip = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), angles[0]);
        let r_thigh = r_hip * nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), angles[1]);
        let r_calf = r_thigh * nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), angles[2]);
        let calf_len = -self.points.iter().find(|p| p.kind == PointKind::Foot && p.leg == leg).map(|p| p.local.z).unwrap_or(0.0);
        hip.offset + r_hip * thigh.offset + r_thigh * calf.offset + r_calf * Vector3::new(0.0, 0.0, -calf_len)
    }

    /// Trunk-center height above flat ground when standing at `pose`.
    pub fn standing_height(&self, pose: &[f64; NUM_JOINTS]) -> f64 {
        (0..NUM_LEGS)
            .map(|leg| {
                let a = [pose[3 * leg], pose[3 * leg + 1], pose[3 * leg + 2]];
                -self.foot_in_trunk(leg, a).z
            })
            .sum::<f64>()
            / NUM_LEGS as f64
            + self.foot_radius
    }
}
