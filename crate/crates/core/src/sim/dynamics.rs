//! Floating-base rigid-body dynamics.
//!
//! Spatial vectors are `[angular; linear]` in world-aligned Plücker
//! coordinates whose reference point coincides with the base origin at the
//! current instant. With that choice every joint motion subspace is a plain
//! world-frame 6-vector and the recursions below need no frame transforms.
//!
//! Generalized velocity layout: `[ω_body(3), v_body(3), q̇(12)]`, where the
//! base twist is expressed in the trunk frame.

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, UnitQuaternion, Vector3, Vector6};

use super::model::{body_joint, RobotModel, NUM_BODIES, TRUNK};
use crate::morphology::NUM_JOINTS;

pub const NDOF: usize = 6 + NUM_JOINTS;
pub type MatN = SMatrix<f64, NDOF, NDOF>;
pub type VecN = SVector<f64, NDOF>;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn ang(v: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

#[inline]
fn lin(v: &Vector6<f64>) -> Vector3<f64> {
    Vector3::new(v[3], v[4], v[5])
}

#[inline]
fn join(a: Vector3<f64>, l: Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a.x, a.y, a.z, l.x, l.y, l.z)
}

/// Motion cross product `v ×m`.
#[inline]
pub fn cross_motion(v: &Vector6<f64>, m: &Vector6<f64>) -> Vector6<f64> {
    let (w, u) = (ang(v), lin(v));
    join(w.cross(&ang(m)), w.cross(&lin(m)) + u.cross(&ang(m)))
}

/// Force cross product `v ×f`.
#[inline]
pub fn cross_force(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let (w, u) = (ang(v), lin(v));
    join(w.cross(&ang(f)) + u.cross(&lin(f)), w.cross(&lin(f)))
}

/// Spatial inertia of a body with mass `m`, COM offset `c` and rotational
/// inertia `ic` about the COM (all world-aligned).
pub fn spatial_inertia(m: f64, c: &Vector3<f64>, ic: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew(c);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(ic + m * cx * cx.transpose()));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(m * cx));
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(m * cx.transpose()));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * m));
    out
}

/// Per-body kinematic quantities for one configuration.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub base_pos: Vector3<f64>,
    pub base_rot: Matrix3<f64>,
    /// World rotation of each body frame.
    pub rot: [Matrix3<f64>; NUM_BODIES],
    /// World position of each body's joint origin.
    pub origin: [Vector3<f64>; NUM_BODIES],
    /// Joint motion subspace (body 0 unused).
    pub axis: [Vector6<f64>; NUM_BODIES],
    /// Spatial velocity of each body.
    pub vel: [Vector6<f64>; NUM_BODIES],
    pub inertia: [Matrix6<f64>; NUM_BODIES],
}

impl Kinematics {
    pub fn new(
        model: &RobotModel,
        base_pos: &Vector3<f64>,
        base_quat: &UnitQuaternion<f64>,
        q: &[f64; NUM_JOINTS],
        nu: &VecN,
    ) -> Self {
        let base_rot = *base_quat.to_rotation_matrix().matrix();
        let mut rot = [Matrix3::identity(); NUM_BODIES];
        let mut origin = [Vector3::zeros(); NUM_BODIES];
        let mut axis = [Vector6::zeros(); NUM_BODIES];
        let mut vel = [Vector6::zeros(); NUM_BODIES];
        let mut inertia = [Matrix6::zeros(); NUM_BODIES];

        rot[TRUNK] = base_rot;
        origin[TRUNK] = *base_pos;
        let w_body = Vector3::new(nu[0], nu[1], nu[2]);
        let v_body = Vector3::new(nu[3], nu[4], nu[5]);
        vel[TRUNK] = join(base_rot * w_body, base_rot * v_body);

        for b in 0..NUM_BODIES {
            let body = &model.bodies[b];
            if b != TRUNK {
                let p = body.parent;
                let j = body_joint(b);
                let a_world = rot[p] * body.axis;
                let o = origin[p] + rot[p] * body.offset;
                let local = nalgebra::Rotation3::from_axis_angle(
                    &nalgebra::Unit::new_unchecked(body.axis),
                    q[j],
                );
                rot[b] = rot[p] * local.matrix();
                origin[b] = o;
                axis[b] = join(a_world, (o - base_pos).cross(&a_world));
                vel[b] = vel[p] + axis[b] * nu[6 + j];
            }
            let c = origin[b] + rot[b] * body.com - base_pos;
            let ic = rot[b] * body.inertia * rot[b].transpose();
            inertia[b] = spatial_inertia(body.mass, &c, &ic);
        }
        Self {
            base_pos: *base_pos,
            base_rot,
            rot,
            origin,
            axis,
            vel,
            inertia,
        }
    }

    /// World position of a point given in body `b`'s frame.
    pub fn point_world(&self, b: usize, local: &Vector3<f64>) -> Vector3<f64> {
        self.origin[b] + self.rot[b] * local
    }

    /// World velocity of the body-`b` material point currently at `x`.
    pub fn point_velocity(&self, b: usize, x: &Vector3<f64>) -> Vector3<f64> {
        let v = &self.vel[b];
        lin(v) + ang(v).cross(&(x - self.base_pos))
    }

    /// Base motion subspace column `k` (0..6).
    fn base_axis(&self, k: usize) -> Vector6<f64> {
        let e = self.base_rot.column(k % 3).into_owned();
        if k < 3 {
            join(e, Vector3::zeros())
        } else {
            join(Vector3::zeros(), e)
        }
    }

    /// Linear-velocity Jacobian (3 × NDOF) of the body-`b` point at world `x`.
    pub fn point_jacobian(&self, model: &RobotModel, b: usize, x: &Vector3<f64>) -> SMatrix<f64, 3, NDOF> {
        let mut jac = SMatrix::<f64, 3, NDOF>::zeros();
        let r = x - self.base_pos;
        for k in 0..6 {
            let s = self.base_axis(k);
            jac.set_column(k, &(lin(&s) + ang(&s).cross(&r)));
        }
        let mut cur = b;
        while cur != TRUNK {
            let s = &self.axis[cur];
            jac.set_column(6 + body_joint(cur), &(lin(s) + ang(s).cross(&r)));
            cur = model.bodies[cur].parent;
        }
        jac
    }

    /// Gravity, Coriolis and centrifugal generalized forces.
    pub fn bias_forces(&self, model: &RobotModel, nu: &VecN, gravity: f64) -> VecN {
        let mut acc = [Vector6::zeros(); NUM_BODIES];
        let mut force = [Vector6::zeros(); NUM_BODIES];
        acc[TRUNK] = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, gravity);
        for b in 0..NUM_BODIES {
            if b != TRUNK {
                let p = model.bodies[b].parent;
                let qd = nu[6 + body_joint(b)];
                acc[b] = acc[p] + cross_motion(&self.vel[b], &(self.axis[b] * qd));
            }
            let iv = self.inertia[b] * self.vel[b];
            force[b] = self.inertia[b] * acc[b] + cross_force(&self.vel[b], &iv);
        }
        let mut out = VecN::zeros();
        for b in (1..NUM_BODIES).rev() {
            out[6 + body_joint(b)] = self.axis[b].dot(&force[b]);
            let p = model.bodies[b].parent;
            let fb = force[b];
            force[p] += fb;
        }
        let f0 = force[TRUNK];
        let n = self.base_rot.transpose() * ang(&f0);
        let f = self.base_rot.transpose() * lin(&f0);
        out.fixed_rows_mut::<3>(0).copy_from(&n);
        out.fixed_rows_mut::<3>(3).copy_from(&f);
        out
    }

    /// Joint-space mass matrix via composite rigid bodies.
    pub fn mass_matrix(&self, model: &RobotModel) -> MatN {
        let mut composite = self.inertia;
        for b in (1..NUM_BODIES).rev() {
            let p = model.bodies[b].parent;
            let cb = composite[b];
            composite[p] += cb;
        }
        let base_axes: [Vector6<f64>; 6] = std::array::from_fn(|k| self.base_axis(k));
        let mut m = MatN::zeros();
        for b in 1..NUM_BODIES {
            let i = 6 + body_joint(b);
            let f = composite[b] * self.axis[b];
            m[(i, i)] = self.axis[b].dot(&f) + model.armature;
            let mut a = model.bodies[b].parent;
            while a != TRUNK {
                let k = 6 + body_joint(a);
                let val = self.axis[a].dot(&f);
                m[(k, i)] = val;
                m[(i, k)] = val;
                a = model.bodies[a].parent;
            }
            for (k, s) in base_axes.iter().enumerate() {
                let val = s.dot(&f);
                m[(k, i)] = val;
                m[(i, k)] = val;
            }
        }
        for r in 0..6 {
            let f = composite[TRUNK] * base_axes[r];
            for c in 0..6 {
                m[(c, r)] = base_axes[c].dot(&f);
            }
        }
        m
    }

    /// Kinetic energy `½ Σ vᵀ I v`.
    pub fn kinetic_energy(&self) -> f64 {
        (0..NUM_BODIES)
            .map(|b| 0.5 * self.vel[b].dot(&(self.inertia[b] * self.vel[b])))
            .sum()
    }

    /// Gravitational potential energy relative to z = 0.
    pub fn potential_energy(&self, model: &RobotModel, gravity: f64) -> f64 {
        (0..NUM_BODIES)
            .map(|b| {
                let body = &model.bodies[b];
                let c = self.origin[b] + self.rot[b] * body.com;
                body.mass * gravity * c.z
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{ControlRandomization, ControlRanges, MorphologySpec};
    use crate::sim::SimConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> RobotModel {
        let mut control = ControlRandomization::nominal(&ControlRanges::default());
        control.com_shift = [0.02, -0.01];
        RobotModel::new(&MorphologySpec::go2_like(), &control, &SimConfig::default())
    }

    fn random_state(rng: &mut ChaCha8Rng) -> (Vector3<f64>, UnitQuaternion<f64>, [f64; 12], VecN) {
        let pos = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0));
        let quat = UnitQuaternion::from_euler_angles(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.0..3.0),
        );
        let q: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let nu = VecN::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        (pos, quat, q, nu)
    }

    #[test]
    fn kinetic_energy_matches_mass_matrix() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (p, r, q, nu) = random_state(&mut rng);
            let kin = Kinematics::new(&m, &p, &r, &q, &nu);
            let mm = kin.mass_matrix(&m);
            let mut arm = MatN::zeros();
            for i in 6..NDOF {
                arm[(i, i)] = m.armature;
            }
            let quad = 0.5 * nu.dot(&((mm - arm) * nu));
            assert!((quad - kin.kinetic_energy()).abs() < 1e-9 * (1.0 + quad.abs()));
            assert!((mm - mm.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn point_jacobian_matches_point_velocity() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (p, r, q, nu) = random_state(&mut rng);
            let kin = Kinematics::new(&m, &p, &r, &q, &nu);
            for pt in &m.points {
                let x = kin.point_world(pt.body, &pt.local);
                let j = kin.point_jacobian(&m, pt.body, &x);
                let v = kin.point_velocity(pt.body, &x);
                assert!((j * nu - v).norm() < 1e-10);
            }
        }
    }

    /// Bias forces equal d/dt(∂T/∂ν) - ∂T/∂q + ∂V/∂q; check the
    /// gravity part against a finite difference of potential energy along
    /// joint coordinates.
    #[test]
    fn gravity_forces_match_potential_gradient() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, r, q, _) = random_state(&mut rng);
        let zero = VecN::zeros();
        let kin = Kinematics::new(&m, &p, &r, &q, &zero);
        let g = kin.bias_forces(&m, &zero, 9.81);
        let h = 1e-6;
        for j in 0..12 {
            let mut qp = q;
            qp[j] += h;
            let mut qm = q;
            qm[j] -= h;
            let vp = Kinematics::new(&m, &p, &r, &qp, &zero).potential_energy(&m, 9.81);
            let vm = Kinematics::new(&m, &p, &r, &qm, &zero).potential_energy(&m, 9.81);
            let fd = (vp - vm) / (2.0 * h);
            assert!((fd - g[6 + j]).abs() < 1e-6, "joint {j}: {fd} vs {}", g[6 + j]);
        }
        // Base linear: gravity force in body frame equals Rᵀ (0, 0, M g).
        let expected = r.inverse() * Vector3::new(0.0, 0.0, m.total_mass * 9.81);
        for k in 0..3 {
            assert!((g[3 + k] - expected[k]).abs() < 1e-9);
        }
    }
}
