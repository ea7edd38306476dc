//! Recorded trajectories: world-frame skeleton keypoints per control step,
//! enough to draw a side view without rebuilding the robot model.
//!
//! Text format:
//!
//! ```text
//! frlab-trajectory 1
//! ground <x> <height>          (terrain profile along the spawn line)
//! frame <t> <g_z> <x y z> × 17
//! ```
//!
//! Keypoints per frame: trunk origin, then for each leg FL, FR, RL, RR the
//! hip, thigh and calf joint origins, then the four feet.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::env::{rng_for, Env};
use crate::error::{Error, Result};
use crate::eval::Controller;
use crate::morphology::NUM_LEGS;
use crate::sim::model::PointKind;
use crate::terrain::{CurriculumState, TerrainFamily};

pub const MAGIC: &str = "frlab-trajectory";
pub const FORMAT_VERSION: u32 = 1;
pub const NUM_KEYPOINTS: usize = 1 + 3 * NUM_LEGS + NUM_LEGS;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub gravity_z: f64,
    pub points: Vec<[f64; 3]>,
}

impl Frame {
    /// Hip, thigh, calf and foot keypoints of one leg.
    pub fn leg(&self, leg: usize) -> [[f64; 3]; 4] {
        let j = 1 + 3 * leg;
        [self.points[j], self.points[j + 1], self.points[j + 2], self.points[1 + 3 * NUM_LEGS + leg]]
    }

    pub fn trunk(&self) -> [f64; 3] {
        self.points[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub ground: Vec<[f64; 2]>,
    pub frames: Vec<Frame>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(format!("trajectory: {}", msg.into()))
}

fn keypoints(env: &Env) -> Vec<[f64; 3]> {
    let kin = env.sim.kinematics(&env.state);
    let v = |x: Vector3<f64>| [x.x, x.y, x.z];
    let mut pts = vec![v(env.state.base_pos)];
    for leg in 0..NUM_LEGS {
        for k in 0..3 {
            pts.push(v(kin.origin[1 + 4 * k + leg]));
        }
    }
    for leg in 0..NUM_LEGS {
        let foot = env
            .sim
            .model
            .points
            .iter()
            .find(|p| p.kind == PointKind::Foot && p.leg == leg)
            .expect("every leg has a foot");
        pts.push(v(kin.point_world(foot.body, &foot.local)));
    }
    pts
}

impl Trajectory {
    /// Runs one episode with `controller` and records every step.
    pub fn record(
        controller: &dyn Controller,
        cfg: &RunConfig,
        family: TerrainFamily,
        level: u32,
        seed: u64,
        steps: usize,
    ) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.curriculum = false;
        let mut envs = vec![Env::new(&cfg, 0, CurriculumState::new(family, level), rng_for(seed, &[0x5245_504C]))?];
        let terrain = envs[0].sim.terrain.clone();
        let [x0, y0] = envs[0].spawn_xy;
        let ground = (0..=80)
            .map(|i| {
                let x = x0 - 2.0 + 0.05 * i as f64;
                [x, terrain.height_at(x, y0)]
            })
            .collect();
        let mut traj = Trajectory { ground, frames: Vec::with_capacity(steps + 1) };
        let snap = |env: &Env, time: f64| Frame {
            time,
            gravity_z: env.state.projected_gravity().z,
            points: keypoints(env),
        };
        traj.frames.push(snap(&envs[0], 0.0));
        for t in 1..=steps.min(cfg.episode_steps - 1) {
            let a: Vec<f64> = controller.act(&envs).row(0).iter().map(|&x| x as f64).collect();
            envs[0].step(&cfg, &a)?;
            traj.frames.push(snap(&envs[0], t as f64 * cfg.control_dt));
        }
        Ok(traj)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n");
        for [x, h] in &self.ground {
            let _ = writeln!(out, "ground {x:?} {h:?}");
        }
        for f in &self.frames {
            let _ = write!(out, "frame {:?} {:?}", f.time, f.gravity_z);
            for p in &f.points {
                let _ = write!(out, " {:?} {:?} {:?}", p[0], p[1], p[2]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty file"))?;
        let version = head
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad(format!("bad header `{head}`")))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version} is not supported")));
        }
        let mut traj = Trajectory::default();
        for (n, line) in lines.enumerate() {
            let mut f = line.split_whitespace();
            let kind = f.next();
            let nums: Vec<f64> = f
                .map(|x| x.parse().map_err(|_| bad(format!("line {}: bad number `{x}`", n + 2))))
                .collect::<Result<_>>()?;
            match (kind, nums.len()) {
                (Some("ground"), 2) => traj.ground.push([nums[0], nums[1]]),
                (Some("frame"), l) if l == 2 + 3 * NUM_KEYPOINTS => traj.frames.push(Frame {
                    time: nums[0],
                    gravity_z: nums[1],
                    points: nums[2..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                }),
                (None, _) => {}
                _ => return Err(bad(format!("line {}: unrecognized record", n + 2))),
            }
        }
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ZeroAction;

    #[test]
    fn record_and_round_trip() {
        let cfg = RunConfig { randomize_morphology: false, ..Default::default() };
        let traj = Trajectory::record(&ZeroAction, &cfg, TerrainFamily::Flat, 1, 3, 10).unwrap();
        assert_eq!(traj.frames.len(), 11);
        assert!(traj.frames.iter().all(|f| f.points.len() == NUM_KEYPOINTS));
        // Supine start: gravity points up in the base frame.
        assert!(traj.frames[0].gravity_z > 0.9);
        let back = Trajectory::from_text(&traj.to_text()).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Trajectory::from_text("").is_err());
        assert!(Trajectory::from_text("frlab-trajectory 9\n").is_err());
        assert!(Trajectory::from_text("frlab-trajectory 1\nframe 0 1 2\n").is_err());
    }
}
