//! Robot morphology and per-environment randomization.
//!
//! All four legs share one hip/thigh/calf geometry. The default sampling
//! ranges are the domain-randomization table used for training; every range
//! can be overridden from the run config.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LEGS: usize = 4;
pub const NUM_JOINTS: usize = 12;

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range::new(v[0], v[1])
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Geometry, masses and limits of one sampled quadruped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologySpec {
    pub trunk_mass: f64,
    pub trunk_length: f64,
    pub trunk_width: f64,
    pub trunk_height: f64,
    pub hip_mass: f64,
    pub hip_length: f64,
    pub thigh_mass: f64,
    pub thigh_length: f64,
    pub thigh_width: f64,
    pub thigh_height: f64,
    pub calf_mass: f64,
    pub calf_length: f64,
    pub calf_width: f64,
    pub calf_height: f64,
    pub joint_limits_lower: [f64; NUM_JOINTS],
    pub joint_limits_upper: [f64; NUM_JOINTS],
    pub torque_limit: f64,
}

/// Control-side randomization drawn once per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRandomization {
    pub kp: [f64; NUM_JOINTS],
    pub kd: [f64; NUM_JOINTS],
    pub motor_strength: [f64; NUM_JOINTS],
    /// Viscous joint damping, N·m·s/rad.
    pub motor_friction: [f64; NUM_JOINTS],
    /// Trunk center-of-mass offset in the trunk frame (x, y), m.
    pub com_shift: [f64; 2],
    pub payload: f64,
    pub ground_friction: f64,
}

/// Sampling ranges for [`MorphologySpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphologyRanges {
    pub trunk_mass: Range,
    pub trunk_length: Range,
    pub trunk_width: Range,
    pub trunk_height: Range,
    pub hip_mass: Range,
    pub hip_length: Range,
    pub thigh_mass: Range,
    pub thigh_length: Range,
    pub thigh_width: Range,
    pub thigh_height: Range,
    pub calf_mass: Range,
    pub calf_length: Range,
    pub calf_width: Range,
    pub calf_height: Range,
    /// Per-leg `[hip, thigh, calf]` joint limits, rad. Not randomized.
    pub hip_joint: Range,
    pub thigh_joint: Range,
    pub calf_joint: Range,
    pub torque_limit: Range,
}

impl Default for MorphologyRanges {
    fn default() -> Self {
        Self {
            trunk_mass: Range::new(4.00, 28.00),
            trunk_length: Range::new(0.37, 0.65),
            trunk_width: Range::new(0.09, 0.30),
            trunk_height: Range::new(0.11, 0.19),
            hip_mass: Range::new(0.30, 0.69),
            hip_length: Range::new(0.03, 0.05),
            thigh_mass: Range::new(0.60, 4.00),
            thigh_length: Range::new(0.21, 0.35),
            thigh_width: Range::new(0.02, 0.04),
            thigh_height: Range::new(0.03, 0.05),
            calf_mass: Range::new(0.10, 0.86),
            calf_length: Range::new(0.21, 0.35),
            calf_width: Range::new(0.016, 0.020),
            calf_height: Range::new(0.013, 0.019),
            hip_joint: Range::new(-1.05, 1.05),
            thigh_joint: Range::new(-1.57, 3.49),
            calf_joint: Range::new(-2.72, -0.84),
            torque_limit: Range::new(35.0, 35.0),
        }
    }
}

/// Sampling ranges for [`ControlRandomization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlRanges {
    pub kp: Range,
    pub kd: Range,
    pub motor_strength: Range,
    pub com_shift: Range,
    pub payload: Range,
    pub motor_friction: Range,
    pub ground_friction: Range,
}

impl Default for ControlRanges {
    fn default() -> Self {
        Self {
            kp: Range::new(20.0, 80.0),
            kd: Range::new(0.6, 2.0),
            motor_strength: Range::new(0.9, 1.1),
            com_shift: Range::new(-0.05, 0.05),
            payload: Range::new(-2.0, 2.0),
            motor_friction: Range::new(0.2, 1.25),
            ground_friction: Range::new(0.25, 1.25),
        }
    }
}

impl MorphologyRanges {
    fn joint_limits(&self) -> ([f64; NUM_JOINTS], [f64; NUM_JOINTS]) {
        let mut lo = [0.0; NUM_JOINTS];
        let mut hi = [0.0; NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            for (k, r) in [self.hip_joint, self.thigh_joint, self.calf_joint]
                .iter()
                .enumerate()
            {
                lo[3 * leg + k] = r.lo;
                hi[3 * leg + k] = r.hi;
            }
        }
        (lo, hi)
    }

    /// Range of the trunk entry of the mass vector (trunk mass plus payload).
    pub fn loaded_trunk_mass(&self, control: &ControlRanges) -> Range {
        Range::new(
            self.trunk_mass.lo + control.payload.lo,
            self.trunk_mass.hi + control.payload.hi,
        )
    }

    /// Ranges of the four mass-vector entries, in mass-vector order.
    pub fn mass_ranges(&self, control: &ControlRanges) -> [Range; 4] {
        [
            self.loaded_trunk_mass(control),
            self.hip_mass,
            self.thigh_mass,
            self.calf_mass,
        ]
    }

    /// Every scalar range paired with its field name.
    pub fn named(&self) -> [(&'static str, Range); 15] {
        [
            ("trunk_mass", self.trunk_mass),
            ("trunk_length", self.trunk_length),
            ("trunk_width", self.trunk_width),
            ("trunk_height", self.trunk_height),
            ("hip_mass", self.hip_mass),
            ("hip_length", self.hip_length),
            ("thigh_mass", self.thigh_mass),
            ("thigh_length", self.thigh_length),
            ("thigh_width", self.thigh_width),
            ("thigh_height", self.thigh_height),
            ("calf_mass", self.calf_mass),
            ("calf_length", self.calf_length),
            ("calf_width", self.calf_width),
            ("calf_height", self.calf_height),
            ("torque_limit", self.torque_limit),
        ]
    }
}

impl MorphologySpec {
    /// Morphology with every field at the midpoint of its range.
    pub fn midpoint(ranges: &MorphologyRanges) -> Self {
        let (lower, upper) = ranges.joint_limits();
        Self {
            trunk_mass: ranges.trunk_mass.mid(),
            trunk_length: ranges.trunk_length.mid(),
            trunk_width: ranges.trunk_width.mid(),
            trunk_height: ranges.trunk_height.mid(),
            hip_mass: ranges.hip_mass.mid(),
            hip_length: ranges.hip_length.mid(),
            thigh_mass: ranges.thigh_mass.mid(),
            thigh_length: ranges.thigh_length.mid(),
            thigh_width: ranges.thigh_width.mid(),
            thigh_height: ranges.thigh_height.mid(),
            calf_mass: ranges.calf_mass.mid(),
            calf_length: ranges.calf_length.mid(),
            calf_width: ranges.calf_width.mid(),
            calf_height: ranges.calf_height.mid(),
            joint_limits_lower: lower,
            joint_limits_upper: upper,
            torque_limit: ranges.torque_limit.mid(),
        }
    }

    /// A Go2-sized robot, handy for scripted scenarios and debugging.
    pub fn go2_like() -> Self {
        let ranges = MorphologyRanges::default();
        Self {
            trunk_mass: 6.9,
            trunk_length: 0.376,
            trunk_width: 0.094,
            trunk_height: 0.114,
            hip_mass: 0.68,
            hip_length: 0.048,
            thigh_mass: 1.0,
            thigh_length: 0.213,
            thigh_width: 0.0245,
            thigh_height: 0.034,
            calf_mass: 0.2,
            calf_length: 0.213,
            calf_width: 0.016,
            calf_height: 0.016,
            ..Self::midpoint(&ranges)
        }
    }

    pub fn sample<R: Rng + ?Sized>(ranges: &MorphologyRanges, rng: &mut R) -> Self {
        let (lower, upper) = ranges.joint_limits();
        Self {
            trunk_mass: ranges.trunk_mass.sample(rng),
            trunk_length: ranges.trunk_length.sample(rng),
            trunk_width: ranges.trunk_width.sample(rng),
            trunk_height: ranges.trunk_height.sample(rng),
            hip_mass: ranges.hip_mass.sample(rng),
            hip_length: ranges.hip_length.sample(rng),
            thigh_mass: ranges.thigh_mass.sample(rng),
            thigh_length: ranges.thigh_length.sample(rng),
            thigh_width: ranges.thigh_width.sample(rng),
            thigh_height: ranges.thigh_height.sample(rng),
            calf_mass: ranges.calf_mass.sample(rng),
            calf_length: ranges.calf_length.sample(rng),
            calf_width: ranges.calf_width.sample(rng),
            calf_height: ranges.calf_height.sample(rng),
            joint_limits_lower: lower,
            joint_limits_upper: upper,
            torque_limit: ranges.torque_limit.sample(rng),
        }
    }

    /// Every scalar field paired with its name, in [`MorphologyRanges::named`] order.
    pub fn scalar_fields(&self) -> [(&'static str, f64); 15] {
        [
            ("trunk_mass", self.trunk_mass),
            ("trunk_length", self.trunk_length),
            ("trunk_width", self.trunk_width),
            ("trunk_height", self.trunk_height),
            ("hip_mass", self.hip_mass),
            ("hip_length", self.hip_length),
            ("thigh_mass", self.thigh_mass),
            ("thigh_length", self.thigh_length),
            ("thigh_width", self.thigh_width),
            ("thigh_height", self.thigh_height),
            ("calf_mass", self.calf_mass),
            ("calf_length", self.calf_length),
            ("calf_width", self.calf_width),
            ("calf_height", self.calf_height),
            ("torque_limit", self.torque_limit),
        ]
    }

    /// Checks the morphology against the default ranges.
    pub fn validate(&self) -> Result<()> {
        self.validate_against(&MorphologyRanges::default())
    }

    pub fn validate_against(&self, ranges: &MorphologyRanges) -> Result<()> {
        for ((field, value), (_, range)) in self.scalar_fields().into_iter().zip(ranges.named()) {
            if !value.is_finite() || !range.contains(value) {
                return Err(Error::OutOfRange {
                    field,
                    value,
                    lo: range.lo,
                    hi: range.hi,
                });
            }
        }
        for (field, m) in [
            ("trunk_mass", self.trunk_mass),
            ("hip_mass", self.hip_mass),
            ("thigh_mass", self.thigh_mass),
            ("calf_mass", self.calf_mass),
        ] {
            if m <= 0.0 {
                return Err(Error::InvalidMorphology(format!("{field} must be positive")));
            }
        }
        for j in 0..NUM_JOINTS {
            if !(self.joint_limits_lower[j] < self.joint_limits_upper[j]) {
                return Err(Error::InvalidMorphology(format!(
                    "joint {j}: lower limit {} not below upper limit {}",
                    self.joint_limits_lower[j], self.joint_limits_upper[j]
                )));
            }
        }
        Ok(())
    }

    /// `[trunk + payload, hip, thigh, calf]`; limb entries are single-link masses.
    pub fn mass_vector(&self, payload: f64) -> [f64; 4] {
        [
            self.trunk_mass + payload,
            self.hip_mass,
            self.thigh_mass,
            self.calf_mass,
        ]
    }

    /// Total robot mass including payload.
    pub fn total_mass(&self, payload: f64) -> f64 {
        self.trunk_mass
            + payload
            + NUM_LEGS as f64 * (self.hip_mass + self.thigh_mass + self.calf_mass)
    }
}

impl ControlRandomization {
    pub fn sample<R: Rng + ?Sized>(ranges: &ControlRanges, rng: &mut R) -> Self {
        let mut kp = [0.0; NUM_JOINTS];
        let mut kd = [0.0; NUM_JOINTS];
        let mut motor_strength = [0.0; NUM_JOINTS];
        let mut motor_friction = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            kp[j] = ranges.kp.sample(rng);
            kd[j] = ranges.kd.sample(rng);
            motor_strength[j] = ranges.motor_strength.sample(rng);
            motor_friction[j] = ranges.motor_friction.sample(rng);
        }
        let com_shift = [ranges.com_shift.sample(rng), ranges.com_shift.sample(rng)];
        Self {
            kp,
            kd,
            motor_strength,
            motor_friction,
            com_shift,
            payload: ranges.payload.sample(rng),
            ground_friction: ranges.ground_friction.sample(rng),
        }
    }

    /// Every range at its midpoint; no COM shift, no payload.
    pub fn nominal(ranges: &ControlRanges) -> Self {
        Self {
            kp: [ranges.kp.mid(); NUM_JOINTS],
            kd: [ranges.kd.mid(); NUM_JOINTS],
            motor_strength: [1.0; NUM_JOINTS],
            motor_friction: [ranges.motor_friction.lo; NUM_JOINTS],
            com_shift: [0.0, 0.0],
            payload: 0.0,
            ground_friction: ranges.ground_friction.mid(),
        }
    }

    /// `k_PD`: the 12 proportional gains followed by the 12 derivative gains.
    pub fn pd_gains(&self) -> [f64; 2 * NUM_JOINTS] {
        let mut out = [0.0; 2 * NUM_JOINTS];
        out[..NUM_JOINTS].copy_from_slice(&self.kp);
        out[NUM_JOINTS..].copy_from_slice(&self.kd);
        out
    }
}

/// Maps a mass vector to zero-mean unit-scale coordinates using range
/// midpoints and half-widths.
pub fn normalize_mass_vector(masses: &[f64; 4], ranges: &[Range; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (masses[i] - ranges[i].mid()) / ranges[i].half_width();
    }
    out
}

pub fn denormalize_mass_vector(normalized: &[f64; 4], ranges: &[Range; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = normalized[i] * ranges[i].half_width() + ranges[i].mid();
    }
    out
}
