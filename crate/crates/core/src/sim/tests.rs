use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::morphology::{ControlRanges, MorphologyRanges};
use crate::terrain::{self, TerrainFamily, TerrainSchedule};

const DT: f64 = 0.02;

pub(crate) fn stand_pose() -> [f64; NUM_JOINTS] {
    let mut q = [0.0; NUM_JOINTS];
    for leg in 0..NUM_LEGS {
        q[3 * leg + 1] = 0.8;
        q[3 * leg + 2] = -1.5;
    }
    q
}

fn go2_sim(terrain: Heightfield) -> Simulator {
    Simulator::new(
        &MorphologySpec::go2_like(),
        &ControlRandomization::nominal(&ControlRanges::default()),
        &SimConfig::default(),
        Arc::new(terrain),
    )
}

fn flat() -> Heightfield {
    Heightfield::flat(8.0, 0.05)
}

#[test]
fn pd_torque_examples() {
    let one = [1.0; NUM_JOINTS];
    let zero = [0.0; NUM_JOINTS];
    let kp = [20.0; NUM_JOINTS];
    let target = [0.1; NUM_JOINTS];
    let t = pd_torque(&kp, &[0.6; 12], &target, &zero, &zero, &one, 100.0);
    assert!((t[0] - 2.0).abs() < 1e-12);
    let t = pd_torque(&kp, &[0.6; 12], &target, &zero, &one, &one, 100.0);
    assert!((t[3] - 1.4).abs() < 1e-12);
    let t = pd_torque(&[300.0; 12], &zero, &target, &zero, &zero, &one, 23.7);
    assert_eq!(t[5], 23.7);
    let t = pd_torque(&[300.0; 12], &zero, &[-0.1; 12], &zero, &zero, &one, 23.7);
    assert_eq!(t[5], -23.7);
}

#[test]
fn free_fall_matches_ballistics() {
    let sim = go2_sim(flat());
    let mut s = sim.place([0.0, 0.0], UnitQuaternion::identity(), stand_pose(), 2.0);
    s.base_lin_vel = Vector3::new(0.0, 0.0, -0.3);
    let (next, report) = sim.step_control(&s, &stand_pose(), DT).unwrap();
    let dv = next.world_lin_vel().z - s.world_lin_vel().z;
    assert!((dv - (-0.1962)).abs() <= 0.001 * 0.1962, "dv = {dv}");
    assert!(!report.any_body_contact());
    assert!(report.foot_contact.iter().all(|c| !c));
    assert_eq!(report.total_foot_force(), 0.0);
    let airborne = sim.contact_report(&next);
    assert_eq!(airborne, ContactReport::default());
}

fn settle_standing(sim: &Simulator, seconds: f64) -> (SimState, ContactReport) {
    let q = stand_pose();
    let mut s = sim.place(sim.terrain.spawn, UnitQuaternion::identity(), q, 0.0);
    let mut report = ContactReport::default();
    for _ in 0..(seconds / DT) as usize {
        let (n, r) = sim.step_control(&s, &q, DT).unwrap();
        s = n;
        report = r;
    }
    (s, report)
}

#[test]
fn static_rest_balances_weight() {
    let sim = go2_sim(flat());
    let (s, report) = settle_standing(&sim, 3.0);
    let weight = sim.model.total_mass * sim.config.gravity;
    let total = report.total_foot_force();
    assert!((total - weight).abs() <= 0.02 * weight, "feet {total} vs weight {weight}");
    assert_eq!(report.foot_contact, [true; 4]);
    assert!(!report.body_contact[0]);
    assert!(!report.any_body_contact());
    assert!(s.projected_gravity().z < -0.99);
}

#[test]
fn static_rest_random_morphologies() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let morph = MorphologySpec::sample(&MorphologyRanges::default(), &mut rng);
        let control = ControlRandomization::sample(&ControlRanges::default(), &mut rng);
        let sim = Simulator::new(&morph, &control, &SimConfig::default(), Arc::new(flat()));
        let (_, report) = settle_standing(&sim, 3.0);
        let weight = sim.model.total_mass * sim.config.gravity;
        let total = report.total_foot_force() + report.knee_force_xy.len() as f64 * 0.0;
        // Heavy trunks may sag onto a knee; the feet plus other contacts
        // still carry the weight.
        if !report.any_body_contact() {
            assert!((total - weight).abs() <= 0.02 * weight, "feet {total} vs weight {weight}");
        }
    }
}

#[test]
fn trajectories_are_deterministic() {
    let terrain = terrain::generate(&TerrainSchedule::default(), TerrainFamily::Rough, 5, 3).unwrap();
    let sim = go2_sim(terrain);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut s = sim.reset_supine(&mut rng).unwrap();
        let mut out = Vec::new();
        for k in 0..100 {
            let target: [f64; 12] = std::array::from_fn(|j| ((k * 7 + j) as f64 * 0.37).sin());
            s = sim.step_control(&s, &target, DT).unwrap().0;
            out.push(s.clone());
        }
        out
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.base_pos.map(f64::to_bits), y.base_pos.map(f64::to_bits));
        assert_eq!(x.q.map(f64::to_bits), y.q.map(f64::to_bits));
        assert_eq!(x.qd.map(f64::to_bits), y.qd.map(f64::to_bits));
    }
}

#[test]
fn supine_reset_properties() {
    let sim = go2_sim(flat());
    let a = sim.reset_supine(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sim.reset_supine(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(a.projected_gravity().z > 0.7);
    assert_eq!(a.time, 0.0);
}

#[test]
fn supine_resets_settle_without_penetration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let morph = MorphologySpec::sample(&MorphologyRanges::default(), &mut rng);
        let control = ControlRandomization::sample(&ControlRanges::default(), &mut rng);
        let sim = Simulator::new(&morph, &control, &SimConfig::default(), Arc::new(flat()));
        let s = sim.reset_supine(&mut rng).unwrap();
        assert!(s.projected_gravity().z > 0.7, "reset {i}: g_z {}", s.projected_gravity().z);
        worst = worst.max(sim.contact_report(&s).max_penetration);
    }
    assert!(worst < 1e-3, "max penetration {worst}");
}

#[test]
fn quaternion_stays_normalized() {
    let sim = go2_sim(flat());
    let mut s = sim.reset_supine(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    s.base_ang_vel = Vector3::new(3.0, -2.0, 5.0);
    for k in 0..200 {
        let target: [f64; 12] = std::array::from_fn(|j| ((k + 3 * j) as f64 * 0.2).cos());
        s = sim.step_control(&s, &target, DT).unwrap().0;
        assert!((s.base_quat.coords.norm() - 1.0).abs() < 1e-9);
    }
}

fn total_energy(sim: &Simulator, s: &SimState) -> f64 {
    let kin = sim.kinematics(s);
    let arm: f64 = s.qd.iter().map(|v| 0.5 * sim.model.armature * v * v).sum();
    let limit: f64 = (0..NUM_JOINTS)
        .map(|j| {
            let over = (s.q[j] - sim.model.upper[j]).max(0.0) + (sim.model.lower[j] - s.q[j]).max(0.0);
            0.5 * sim.config.limit_stiffness * over * over
        })
        .sum();
    let contact: f64 = sim
        .candidates(&kin, None)
        .iter()
        .map(|c| 0.5 * sim.config.contact_stiffness * c.depth * c.depth)
        .sum();
    kin.kinetic_energy() + arm + kin.potential_energy(&sim.model, sim.config.gravity) + limit + contact
}

#[test]
fn passive_energy_does_not_grow() {
    let mut control = ControlRandomization::nominal(&ControlRanges::default());
    control.kp = [0.0; 12];
    control.kd = [0.0; 12];
    control.motor_friction = [0.0; 12];
    control.ground_friction = 0.0;
    let sim = Simulator::new(
        &MorphologySpec::go2_like(),
        &control,
        &SimConfig::default(),
        Arc::new(flat()),
    );
    let mut s = sim.place([0.0, 0.0], UnitQuaternion::from_euler_angles(0.3, 0.2, 0.0), stand_pose(), 0.15);
    s.base_ang_vel = Vector3::new(1.0, -0.5, 0.8);
    let e0 = total_energy(&sim, &s);
    let mut prev = e0;
    for _ in 0..150 {
        s = sim.step_control(&s, &stand_pose(), DT).unwrap().0;
        let e = total_energy(&sim, &s);
        assert!(e - prev <= 0.01 * e0.abs() * DT + 1e-9, "energy grew {prev} -> {e}");
        prev = e;
    }
}

#[test]
fn free_floating_energy_does_not_grow() {
    let mut control = ControlRandomization::nominal(&ControlRanges::default());
    control.kp = [0.0; 12];
    control.kd = [0.0; 12];
    control.motor_friction = [0.0; 12];
    let mut cfg = SimConfig::default();
    cfg.gravity = 0.0;
    let sim = Simulator::new(&MorphologySpec::go2_like(), &control, &cfg, Arc::new(flat()));
    let mut s = sim.place([0.0, 0.0], UnitQuaternion::identity(), stand_pose(), 5.0);
    s.base_ang_vel = Vector3::new(0.5, 1.0, -0.7);
    s.qd = std::array::from_fn(|j| ((j as f64) * 0.9).sin());
    let e0 = total_energy(&sim, &s);
    for _ in 0..50 {
        s = sim.step_control(&s, &stand_pose(), DT).unwrap().0;
    }
    let e1 = total_energy(&sim, &s);
    assert!(e1 <= e0 * 1.01, "{e0} -> {e1}");
    assert!(e1 >= e0 * 0.9, "{e0} -> {e1}");
}

#[test]
fn falling_feet_do_not_tunnel() {
    let sim = go2_sim(flat());
    let q = stand_pose();
    let mut s = sim.place([0.0, 0.0], UnitQuaternion::identity(), q, 0.0005);
    s.base_lin_vel = Vector3::new(0.0, 0.0, -2.0);
    let mut state = s;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut report = ContactReport::default();
        state.time += 0.0;
        sim.substep(&mut state, &q, &mut report, 1.0).unwrap();
        let now = sim.contact_report(&state).max_penetration;
        worst = worst.max(now);
    }
    assert!(worst < 5e-3, "penetration {worst}");
}

#[test]
fn knee_against_riser_reports_horizontal_force() {
    // A riser whose face passes just behind the middle of the front-left calf.
    let probe = go2_sim(flat());
    let mid = *probe
        .model
        .points
        .iter()
        .find(|p| p.kind == PointKind::Knee && p.leg == 0 && p.local.z < 0.0)
        .unwrap();
    let at_origin = probe.place([0.0, 0.0], UnitQuaternion::identity(), stand_pose(), 0.0);
    let px = probe.kinematics(&at_origin).point_world(mid.body, &mid.local).x;
    let s = probe.place([0.105 - px, 0.0], UnitQuaternion::identity(), stand_pose(), 0.0);
    let mut hf = flat();
    for iy in 0..hf.ny {
        for ix in 0..hf.nx {
            let [x, y] = hf.node_position(ix, iy);
            if x < 0.101 && x > -0.2 && y > 0.0 {
                hf.grid[iy * hf.nx + ix] = 0.2;
            }
        }
    }
    let sim = go2_sim(hf);
    let report = sim.contact_report(&s);
    assert!(report.knee_force_xy[0][0] > 0.0, "{:?}", report.knee_force_xy);
    assert!(report.body_contact[9]);
}
