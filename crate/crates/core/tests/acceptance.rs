//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line to
//! stderr (bypassing the capture of passing tests) and then asserts it.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use frlab_core::agent::Agent;
use frlab_core::checkpoint::Checkpoint;
use frlab_core::config::RunConfig;
use frlab_core::env::{rng_for, Env};
use frlab_core::eval::{self, McpRecord};
use frlab_core::mcp::{self, Ablation, Mcp, McpConfig, McpTargets};
use frlab_core::morphology::{ControlRandomization, ControlRanges, MorphologyRanges, MorphologySpec};
use frlab_core::nn::gradcheck::max_rel_error;
use frlab_core::nn::Parameters;
use frlab_core::observation::{
    self, HISTORY_DIM, HISTORY_LEN, LATENT_DIM, OBS_DIM, POLICY_DIM, PRIVILEGED_DIM, SCAN_DIM,
};
use frlab_core::policy::{self, gae, ActorCritic, PolicyConfig, PpoBatch, PpoConfig};
use frlab_core::rewards::{self, MotionInputs, RewardConfig, STAND_POSE};
use frlab_core::sim::{SimConfig, Simulator};
use frlab_core::terrain::{self, CurriculumState, Heightfield, TerrainFamily, TerrainSchedule, MAX_LEVEL, MIN_LEVEL};
use frlab_core::trainer::{IterationStats, Trainer};

fn report(n: u32, ok: bool, detail: impl std::fmt::Display) -> bool {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
    ok
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1. Reward terms against closed-form values.
#[test]
fn criterion_01_reward_correctness() {
    let start = std::time::Instant::now();
    let cfg = RewardConfig::default();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let zero = [0.0; 12];
    let lower = [-1.0; 12];
    let upper = [1.0; 12];

    let up = rewards::r_orientation(&[0.0, 0.0, -1.0], &STAND_POSE, &cfg);
    checks.push(("upright terms", up[0], 0.0));
    checks.push(("upright gaussian", up[1], 6.0));
    checks.push(("upright posture", up[2], 4.0));
    checks.push(("upright sum", up.iter().sum(), 10.0));
    let supine = rewards::r_orientation(&[0.0, 0.0, 1.0], &STAND_POSE, &cfg);
    checks.push(("supine gaussian", supine[1], 6.0 * (-2.0f64 / 0.0625).exp()));
    checks.push(("supine posture", supine[2], 0.0));
    let side = rewards::r_orientation(&[0.0, 1.0, 0.0], &STAND_POSE, &cfg);
    checks.push(("side tilt", side[0], -0.5));
    checks.push(("side gaussian", side[1], 6.0 * (-8.0f64).exp()));

    let c = rewards::r_contact(&[true; 4], false, &cfg);
    checks.push(("four feet", c.iter().sum(), 1.2));
    checks.push(("airborne", rewards::r_contact(&[false; 4], false, &cfg).iter().sum(), 0.0));
    checks.push(("two feet + trunk", rewards::r_contact(&[true, true, false, false], true, &cfg).iter().sum(), 0.4));

    checks.push(("no knee, no drift", rewards::r_stability(&[[0.0; 2]; 4], [0.0; 2], [0.0; 2], &cfg).iter().sum(), 0.0));
    let knee = [[30.0, 40.0], [0.0; 2], [0.0; 2], [0.0; 2]];
    checks.push(("knee 50 N", rewards::r_stability(&knee, [0.0; 2], [0.0; 2], &cfg).iter().sum(), -0.5));
    checks.push(("drift 5 m clipped", rewards::r_stability(&[[0.0; 2]; 4], [3.0, 4.0], [0.0; 2], &cfg)[1], -0.4));

    let m = |q: &[f64; 12], qd: &[f64; 12]| {
        rewards::r_motion(
            &MotionInputs { q, qd, qdd: &zero, torque: &zero, action: &zero, prev_action: &zero, lower: &lower, upper: &upper },
            &cfg,
        )
    };
    checks.push(("motion at rest", m(&zero, &zero).iter().sum(), 0.0));
    let mut q = zero;
    q[0] = 1.5;
    q[7] = -1.2;
    checks.push(("two limit violations", m(&q, &zero)[0], -2.0));
    let ones = [1.0; 12];
    checks.push(("ang-vel limit", m(&zero, &ones)[1], -0.24));
    checks.push(("joint velocity", m(&zero, &ones)[3], -0.12));

    let inputs = rewards::StepInputs {
        gravity: [0.0, 0.0, -1.0],
        feet: &[true; 4],
        body_contact_any: false,
        knee_fxy: &[[0.0; 2]; 4],
        p_current_xy: [0.0; 2],
        p_init_xy: [0.0; 2],
        motion: MotionInputs {
            q: &STAND_POSE,
            qd: &zero,
            qdd: &zero,
            torque: &zero,
            action: &zero,
            prev_action: &zero,
            lower: &[-3.0; 12],
            upper: &[3.0; 12],
        },
    };
    let b = rewards::compute(&inputs, &cfg, 0.02);
    checks.push(("upright resting total", b.total(), 11.2));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, 1e-9))
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    assert!(report(
        1,
        bad.is_empty() && secs < 1.0,
        format!("{} reward examples within 1e-9 in {secs:.3} s {bad:?}", checks.len()),
    ));
}

// 2. Predictor losses in closed form.
#[test]
fn criterion_02_loss_correctness() {
    let start = std::time::Instant::now();
    let m = [0.3, -0.2, 0.9, 0.1];
    let mass = mcp::mse(&m, &m);
    let bce = mcp::bce(&[0.5; 13], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    let kl0 = mcp::kl_standard_normal(&[0.0; 16], &[0.0; 16]);
    let mut mean = [0.0; 16];
    mean[3] = 1.0;
    let kl1 = mcp::kl_standard_normal(&mean, &[0.0; 16]);
    let ok = mass == 0.0 && close(bce, 13.0 * 2f64.ln(), 1e-6) && kl0 == 0.0 && close(kl1, 0.5, 1e-9);
    let secs = start.elapsed().as_secs_f64();
    assert!(report(
        2,
        ok && secs < 1.0,
        format!("mass {mass}, BCE {bce:.9} (13 ln 2 = {:.9}), KL {kl0} / {kl1} in {secs:.3} s", 13.0 * 2f64.ln()),
    ));
}

// 3. Analytic gradients against central differences on small networks.
#[test]
fn criterion_03_gradient_validation() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let cfg = McpConfig { encoder_hidden: vec![2], decoder_hidden: vec![3], ..Default::default() };
    let model = Mcp::<f64>::new(&cfg, &mut rng);
    let b = 3;
    let h = Array2::from_shape_fn((b, HISTORY_DIM), |_| rng.gen_range(-1.0..1.0));
    let mass = Array2::from_shape_fn((b, 4), |_| rng.gen_range(-1.0..1.0));
    let contact = Array2::from_shape_fn((b, 13), |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    let next = Array2::from_shape_fn((b, OBS_DIM), |_| rng.gen_range(-1.0..1.0));
    let noise = Array2::from_shape_fn((b, LATENT_DIM), |_| rng.sample::<f64, _>(StandardNormal));
    let targets = McpTargets { mass: mass.view(), contact: contact.view(), next_obs: next.view() };
    let ablation = Ablation::default();
    let (_, grads) = model.loss_and_grad(h.view(), &targets, noise.view(), &ablation, &cfg);
    let flat = model.to_flat();
    let mut probe = model.clone();
    let mcp_err = max_rel_error(
        &mut |x| {
            probe.set_flat(x);
            probe.loss(h.view(), &targets, noise.view(), &ablation, &cfg).total
        },
        &flat,
        &grads.to_flat(),
        0..flat.len(),
        1e-6,
    );
    let mcp_params = flat.len();

    let pcfg = PolicyConfig { actor_hidden: vec![4], critic_hidden: vec![4], init_log_std: -0.3, ..Default::default() };
    let ac = ActorCritic::<f64>::with_dims(&pcfg, 6, 5, &mut rng);
    let n = 7;
    let p = Array2::from_shape_fn((n, 6), |_| rng.gen_range(-1.0..1.0));
    let s = Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0..1.0));
    let mean = ac.act_mean(p.view());
    let actions = &mean + &Array2::from_shape_fn((n, 12), |_| rng.gen_range(-0.5..0.5));
    // Offsets push some ratios outside the clip range.
    let old = Array1::from_shape_fn(n, |i| {
        let lp = policy::gaussian_log_prob(
            actions.row(i).as_slice().unwrap(),
            mean.row(i).as_slice().unwrap(),
            ac.log_std.as_slice().unwrap(),
        );
        lp + [0.0, 0.1, -0.1, 0.5, -0.5, 0.05, -0.02][i]
    });
    let adv = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 1.0 } else { -0.7 });
    let ret = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
    let batch = PpoBatch {
        p: p.view(),
        s: s.view(),
        actions: actions.view(),
        old_log_prob: old.view(),
        advantages: adv.view(),
        returns: ret.view(),
    };
    let ppo_cfg = PpoConfig::default();
    let (_, g) = policy::ppo_loss_and_grad(&ac, &batch, &ppo_cfg);
    let flat = ac.to_flat();
    let mut probe = ac.clone();
    let ppo_err = max_rel_error(
        &mut |x| {
            probe.set_flat(x);
            policy::ppo_loss_and_grad(&probe, &batch, &ppo_cfg).0.total
        },
        &flat,
        &g.to_flat(),
        0..flat.len(),
        1e-6,
    );
    let secs = start.elapsed().as_secs_f64();
    let ok = mcp_err < 1e-4 && ppo_err < 1e-4 && mcp_params <= 1000 && flat.len() <= 1000 && secs < 60.0;
    assert!(report(
        3,
        ok,
        format!(
            "predictor rel err {mcp_err:.2e} ({mcp_params} params), PPO rel err {ppo_err:.2e} ({} params), {secs:.2} s",
            flat.len()
        ),
    ));
}

/// Discounted sums computed directly from the definition.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next_value = |t: usize| if t + 1 < n { v[t + 1] } else { last };
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + if d[t] { 0.0 } else { gamma * next_value(t) } - v[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * delta[k];
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            sum
        })
        .collect()
}

// 4. GAE against the brute-force oracle.
#[test]
fn criterion_04_gae_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
        let last = rng.gen_range(-2.0..2.0);
        let (gamma, lambda) = (rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0));
        let (adv, ret) = gae(&r, &v, &d, last, gamma, lambda);
        let want = gae_oracle(&r, &v, &d, last, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs());
            worst = worst.max((ret[t] - (want[t] + v[t])).abs());
        }
    }
    assert!(report(4, worst <= 1e-10, format!("1000 sequences, max abs error {worst:.2e}")));
}

// 5. Dimensions on every step of a 100-step rollout.
#[test]
fn criterion_05_dimensions() {
    let cfg = RunConfig::default();
    let mut rng = rng_for(5, &[0]);
    let agent = Agent::new(&cfg, &mut rng);
    let mut envs: Vec<Env> = (0..2)
        .map(|i| Env::new(&cfg, i, CurriculumState::new(TerrainFamily::Rough, 3), rng_for(5, &[1, i as u64])).unwrap())
        .collect();
    let mut steps = 0;
    let mut failures = Vec::new();
    for t in 0..100 {
        let inf = agent.infer(&envs, None);
        let actions = agent.policy.act_mean(inf.p.view());
        for (i, env) in envs.iter_mut().enumerate() {
            let s = env.privileged();
            let frames: Vec<_> = env.history.frames().collect();
            let ok = env.obs.len() == 42
                && frames.len() == HISTORY_LEN
                && env.history.flatten().len() == 5 * 42
                && inf.history.ncols() == HISTORY_DIM
                && inf.p.ncols() == POLICY_DIM
                && POLICY_DIM == 75
                && s.len() == PRIVILEGED_DIM
                && PRIVILEGED_DIM == 277
                && SCAN_DIM == 17 * 11
                && s.iter().all(|x| x.is_finite())
                && inf.p.row(i).iter().all(|x| x.is_finite());
            if !ok {
                failures.push(t);
            }
            let a: Vec<f64> = actions.row(i).iter().map(|&x| x as f64).collect();
            env.step(&cfg, &a).unwrap();
            steps += 1;
        }
    }
    assert!(report(
        5,
        failures.is_empty(),
        format!("o=42, o^H=5x42, p=75, s=277 (scan 17x11) on {steps} env steps; failing steps {failures:?}"),
    ));
}

// 6. Static rest, free fall and determinism.
#[test]
fn criterion_06_simulator_physics() {
    let stand = STAND_POSE;
    let sim = Simulator::new(
        &MorphologySpec::go2_like(),
        &ControlRandomization::nominal(&ControlRanges::default()),
        &SimConfig::default(),
        Arc::new(Heightfield::flat(8.0, 0.05)),
    );
    let dt = 0.02;

    let mut s = sim.place([0.0, 0.0], UnitQuaternion::identity(), stand, 0.0);
    let mut rep = Default::default();
    for _ in 0..150 {
        let (n, r) = sim.step_control(&s, &stand, dt).unwrap();
        s = n;
        rep = r;
    }
    let weight = sim.model.total_mass * sim.config.gravity;
    let feet = frlab_core::sim::ContactReport::total_foot_force(&rep);
    let rest_err = (feet - weight).abs() / weight;

    let mut f = sim.place([0.0, 0.0], UnitQuaternion::identity(), stand, 3.0);
    f.base_lin_vel = Vector3::new(0.0, 0.0, 0.5);
    let v0 = f.world_lin_vel().z;
    let steps = 15;
    for _ in 0..steps {
        f = sim.step_control(&f, &stand, dt).unwrap().0;
    }
    let expected = v0 - sim.config.gravity * dt * steps as f64;
    let fall_err = ((f.world_lin_vel().z - expected) / expected).abs();

    let terrain = terrain::generate(&TerrainSchedule::default(), TerrainFamily::Rough, 6, 9).unwrap();
    let rough = Simulator::new(
        &MorphologySpec::sample(&MorphologyRanges::default(), &mut ChaCha8Rng::seed_from_u64(1)),
        &ControlRandomization::sample(&ControlRanges::default(), &mut ChaCha8Rng::seed_from_u64(2)),
        &SimConfig::default(),
        Arc::new(terrain),
    );
    let run = || {
        let mut s = rough.reset_supine(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut bits = Vec::new();
        for k in 0..100 {
            let target: [f64; 12] = std::array::from_fn(|j| ((k * 5 + j) as f64 * 0.41).sin());
            s = rough.step_control(&s, &target, dt).unwrap().0;
            bits.extend(s.q.iter().chain(s.qd.iter()).map(|x| x.to_bits()));
            bits.extend(s.base_pos.iter().map(|x| x.to_bits()));
        }
        bits
    };
    let deterministic = run() == run();
    assert!(report(
        6,
        rest_err <= 0.02 && fall_err <= 0.001 && deterministic,
        format!(
            "rest: feet {feet:.2} N vs weight {weight:.2} N ({:.3}%); free fall error {:.4}%; bitwise deterministic {deterministic}",
            100.0 * rest_err,
            100.0 * fall_err
        ),
    ));
}

// 7. Randomization bounds and coverage.
#[test]
fn criterion_07_domain_randomization() {
    let ranges = MorphologyRanges::default();
    let control = ControlRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let named = ranges.named();
    let mut lo = vec![f64::INFINITY; named.len() + 7];
    let mut hi = vec![f64::NEG_INFINITY; named.len() + 7];
    let mut outside = 0usize;
    let n = 100_000;
    for _ in 0..n {
        let m = MorphologySpec::sample(&ranges, &mut rng);
        let c = ControlRandomization::sample(&control, &mut rng);
        let mut values: Vec<(f64, frlab_core::morphology::Range)> =
            m.scalar_fields().iter().zip(&named).map(|(v, r)| (v.1, r.1)).collect();
        values.push((c.kp[0], control.kp));
        values.push((c.kd[5], control.kd));
        values.push((c.motor_strength[11], control.motor_strength));
        values.push((c.motor_friction[3], control.motor_friction));
        values.push((c.com_shift[1], control.com_shift));
        values.push((c.payload, control.payload));
        values.push((c.ground_friction, control.ground_friction));
        for (k, (v, r)) in values.iter().enumerate() {
            if !r.contains(*v) {
                outside += 1;
            }
            lo[k] = lo[k].min(*v);
            hi[k] = hi[k].max(*v);
        }
        outside += usize::from(m.validate().is_err());
    }
    let mut ranges_all: Vec<frlab_core::morphology::Range> = named.iter().map(|r| r.1).collect();
    ranges_all.extend([
        control.kp,
        control.kd,
        control.motor_strength,
        control.motor_friction,
        control.com_shift,
        control.payload,
        control.ground_friction,
    ]);
    let coverage: Vec<f64> = ranges_all
        .iter()
        .enumerate()
        .map(|(k, r)| if r.hi > r.lo { (hi[k] - lo[k]) / (r.hi - r.lo) } else { 1.0 })
        .collect();
    let worst = coverage.iter().copied().fold(1.0, f64::min);
    assert!(report(
        7,
        outside == 0 && worst >= 0.95,
        format!("{n} samples, {outside} out of bounds, minimum range coverage {:.2}%", 100.0 * worst),
    ));
}

// 8. Curriculum rule on scripted outcome sequences.
#[test]
fn criterion_08_curriculum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    let mut detail = Vec::new();

    // Five clean successes from level 1, then three failures.
    let mut c = CurriculumState::new(TerrainFamily::Rough, 1);
    let mut levels = Vec::new();
    for &(s, d) in &[(true, 0.2), (true, 0.5), (true, 0.1), (true, 0.9), (true, 0.3), (false, 0.2), (false, 2.0), (false, 0.0)] {
        c.update_level(s, d, &mut rng);
        levels.push(c.level);
    }
    ok &= levels == [2, 3, 4, 5, 6, 5, 4, 3];
    detail.push(format!("promote/demote {levels:?}"));

    // Success with displacement of a meter or more leaves the level alone.
    let mut c = CurriculumState::new(TerrainFamily::Slope, 4);
    c.update_level(true, 1.0, &mut rng);
    c.update_level(true, 3.5, &mut rng);
    ok &= c.level == 4;
    detail.push(format!("far successes keep level {}", c.level));

    // Failures at the bottom stay at 1; successes at the top resample.
    let mut c = CurriculumState::new(TerrainFamily::Stairs, 1);
    for _ in 0..5 {
        c.update_level(false, 0.0, &mut rng);
    }
    ok &= c.level == MIN_LEVEL;
    let mut resampled = std::collections::BTreeSet::new();
    for _ in 0..500 {
        let mut c = CurriculumState::new(TerrainFamily::Beams, MAX_LEVEL);
        c.update_level(true, 0.1, &mut rng);
        ok &= c.resamples == 1;
        resampled.insert(c.level);
    }
    ok &= resampled.len() == 10;
    detail.push(format!("top-level resamples hit {} levels", resampled.len()));

    // Random sequences never leave [1, 10].
    let mut c = CurriculumState::new(TerrainFamily::Gaps, 5);
    for _ in 0..100_000 {
        let s = rng.gen_bool(0.6);
        c.update_level(s, rng.gen_range(0.0..1.5), &mut rng);
        ok &= (MIN_LEVEL..=MAX_LEVEL).contains(&c.level);
    }
    detail.push("100000 random outcomes stay in [1, 10]".into());
    assert!(report(8, ok, detail.join("; ")));
}

fn smoke_config() -> RunConfig {
    let path = std::env::var_os("FRLAB_SMOKE_CONFIG")
        .map(Into::into)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml"));
    let mut cfg = RunConfig::load(&path).expect("smoke config");
    // Shorter runs for exercising the evaluation path; the criterion uses the config as is.
    if let Some(n) = std::env::var("FRLAB_SMOKE_ITERATIONS").ok().and_then(|v| v.parse().ok()) {
        cfg.iterations = n;
    }
    cfg
}

fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    x.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// Mean BCE of constant per-component probabilities.
fn prior_bce(records: &[&McpRecord], prior: &[f64; 13]) -> f64 {
    let n = records.len().max(1) as f64;
    records.iter().map(|r| mcp::bce(prior, &r.contact_true)).sum::<f64>() / n
}

fn pred_bce(records: &[&McpRecord]) -> f64 {
    let n = records.len().max(1) as f64;
    records.iter().map(|r| mcp::bce(&r.contact_pred, &r.contact_true)).sum::<f64>() / n
}

// 9 and 10 share one smoke training run.
#[test]
fn criteria_09_10_smoke_training_and_predictor() {
    let cfg = smoke_config();
    let start = std::time::Instant::now();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut history: Vec<IterationStats> = Vec::new();
    trainer.train(|s| history.push(s.clone())).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let agent = {
        let mut a = trainer.agent.clone();
        a.obs_norm.frozen = true;
        a.priv_norm.frozen = true;
        a
    };

    // Held-out episodes: evaluation seeds never used in training.
    let per_family = 256 / cfg.families.len();
    let mut results = Vec::new();
    let mut records = Vec::new();
    for (k, &family) in cfg.families.iter().enumerate() {
        let run = eval::run_episodes(&agent, &cfg, family, 1, per_family, 0xA11CE + k as u64, Some(&agent)).unwrap();
        results.extend(run.results);
        records.extend(run.mcp);
    }
    let success = results.iter().filter(|r| r.success).count() as f64 / results.len() as f64;

    let trend_families = [TerrainFamily::Rough, TerrainFamily::Slope];
    let cells = eval::success_matrix(&agent, &cfg, &trend_families, &[1, 4, 7, 10], 32, 1).unwrap();
    let trend = eval::level_trend(&cells);
    let trend_ok = trend.iter().all(|(_, rho)| *rho <= 0.0);

    // Episodes finish only every few iterations; iterations without one report NaN.
    let returns: Vec<f64> = history
        .iter()
        .take(200)
        .map(|s| s.mean_episode_return)
        .filter(|r| r.is_finite())
        .collect();
    let early = moving_average(&returns, (returns.len() / 4).max(1));
    let improved = early.last().copied().unwrap_or(f64::NAN) > early.first().copied().unwrap_or(f64::NAN);

    let ok9 = report(
        9,
        success >= 0.70 && trend_ok && improved,
        format!(
            "{} iterations in {minutes:.1} min (1 worker); held-out success {:.1}% on {} episodes (need 70%); \
             Spearman(level, success) {:?}; moving-average episode return over the first 200 iterations {:.1} -> {:.1} (improved {improved})",
            history.len(),
            100.0 * success,
            results.len(),
            trend.iter().map(|(f, r)| format!("{f} {r:+.2}")).collect::<Vec<_>>(),
            early.first().copied().unwrap_or(f64::NAN),
            early.last().copied().unwrap_or(f64::NAN),
        ),
    );

    // Predictor usefulness on the same held-out episodes.
    let n = records.len() as f64;
    let mut mean_mass = [0.0; 4];
    let mut prior = [0.0; 13];
    for r in &records {
        for k in 0..4 {
            mean_mass[k] += r.mass_true[k] / n;
        }
        for k in 0..13 {
            prior[k] += r.contact_true[k] / n;
        }
    }
    let mass_mse = records.iter().map(|r| mcp::mse(&r.mass_pred, &r.mass_true)).sum::<f64>() / n;
    let base_mse = records.iter().map(|r| mcp::mse(&mean_mass, &r.mass_true)).sum::<f64>() / n;
    let mut loads: Vec<f64> = records.iter().map(|r| r.joint_load).collect();
    loads.sort_by(f64::total_cmp);
    let median = loads[loads.len() / 2];
    let dynamic: Vec<&McpRecord> = records.iter().filter(|r| r.joint_load > median).collect();
    let calm: Vec<&McpRecord> = records.iter().filter(|r| r.joint_load <= median).collect();
    let (dyn_pred, dyn_prior) = (pred_bce(&dynamic), prior_bce(&dynamic, &prior));
    let calm_pred = pred_bce(&calm);
    let ok = mass_mse <= 0.8 * base_mse && dyn_pred <= 0.8 * dyn_prior && dyn_pred < calm_pred;
    let ok10 = report(
        10,
        ok,
        format!(
            "mass MSE {mass_mse:.4} vs mean baseline {base_mse:.4}; dynamic-phase BCE {dyn_pred:.3} vs prior {dyn_prior:.3}; \
             static-phase BCE {calm_pred:.3} ({} records, load median {median:.2} N m)",
            records.len()
        ),
    );
    assert!(ok9 && ok10, "criterion 9 {ok9}, criterion 10 {ok10}");
}

fn plumbing_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 11,
        num_envs: 8,
        episode_steps: 40,
        horizon: 12,
        checkpoint_every: 10,
        families: vec![TerrainFamily::Flat, TerrainFamily::Rough, TerrainFamily::Stairs],
        ..Default::default()
    };
    c.policy.actor_hidden = vec![32, 16];
    c.policy.critic_hidden = vec![32, 16];
    c.mcp.encoder_hidden = vec![32];
    c.mcp.decoder_hidden = vec![32];
    c
}

// 11. Ablated runs complete and report distinct predictor losses.
#[test]
fn criterion_11_ablation_plumbing() {
    let variants = [
        ("full", Ablation::default()),
        ("no_mass", Ablation { no_mass: true, ..Default::default() }),
        ("no_col", Ablation { no_col: true, ..Default::default() }),
        ("no_est", Ablation { no_est: true, ..Default::default() }),
    ];
    let mut ok = true;
    let mut finals = Vec::new();
    let mut detail = Vec::new();
    for (name, ablation) in variants {
        let mut cfg = plumbing_config();
        cfg.ablation = ablation;
        let mut t = Trainer::new(cfg).unwrap();
        let mut sums = [0.0f64; 4];
        let mut faults = 0;
        for _ in 0..50 {
            let s = t.iterate().unwrap();
            ok &= s.is_finite();
            faults += s.faults;
            sums[0] += s.mcp.mass_mse;
            sums[1] += s.mcp.contact_bce;
            sums[2] += s.mcp.recon_mse;
            sums[3] += s.mcp.kl;
        }
        ok &= t.iteration == 50 && t.nan_recoveries == 0 && t.agent.is_finite();
        detail.push(format!(
            "{name}: mass {:.3} contact {:.3} recon {:.3} kl {:.3} faults {faults}",
            sums[0] / 50.0,
            sums[1] / 50.0,
            sums[2] / 50.0,
            sums[3] / 50.0
        ));
        finals.push(sums);
    }
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            ok &= finals[i] != finals[j];
        }
    }
    // Removed heads contribute nothing.
    ok &= finals[1][0] == 0.0 && finals[2][1] == 0.0 && finals[3][2] == 0.0 && finals[3][3] == 0.0;
    assert!(report(11, ok, detail.join("; ")));
}

// 12. Byte-identical checkpoint round trip and bit-exact resume.
#[test]
fn criterion_12_checkpoint_round_trip() {
    let mut cfg = plumbing_config();
    cfg.checkpoint_every = 3;
    let mut a = Trainer::new(cfg).unwrap();
    for _ in 0..3 {
        a.iterate().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.bin");
    let second = dir.path().join("b.bin");
    a.checkpoint().save(&first).unwrap();
    let mut b = Trainer::load(&first).unwrap();
    b.checkpoint().save(&second).unwrap();
    let bytes_equal = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();
    let reloaded = Checkpoint::load(&second).unwrap() == Checkpoint::load(&first).unwrap();

    let bits = |s: &IterationStats| {
        [
            s.mean_step_reward,
            s.ppo.surrogate,
            s.ppo.value,
            s.ppo.entropy,
            s.ppo.approx_kl,
            s.ppo.total,
            s.learning_rate,
            s.mcp.mass_mse,
            s.mcp.contact_bce,
            s.mcp.recon_mse,
            s.mcp.kl,
            s.mcp.total,
        ]
        .map(f64::to_bits)
    };
    let mut same = true;
    for _ in 0..2 {
        let (x, y) = (a.iterate().unwrap(), b.iterate().unwrap());
        same &= bits(&x) == bits(&y);
    }
    assert!(report(
        12,
        bytes_equal && reloaded && same,
        format!("save-load-save byte identical {bytes_equal}; resumed losses bit-exact over 2 iterations {same}"),
    ));
}

#[test]
fn observation_layout_is_documented() {
    assert_eq!(observation::obs_labels().len(), OBS_DIM);
    assert_eq!(observation::privileged_labels().len(), PRIVILEGED_DIM);
}
