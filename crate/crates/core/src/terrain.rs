//! Heightfield terrains and the per-environment difficulty curriculum.
//!
//! Six families are generated at ten difficulty levels. The controlling
//! scalar of each family is an affine function of the level; the endpoints
//! live in [`TerrainSchedule`] and can be overridden from the run config.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::Range;

pub const MIN_LEVEL: u32 = 1;
pub const MAX_LEVEL: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerrainFamily {
    Rough,
    Slope,
    Stairs,
    DiscreteStones,
    Gaps,
    Beams,
    /// Debug family: zero height everywhere.
    Flat,
}

impl TerrainFamily {
    /// The six evaluation families, in report order.
    pub const EVAL: [TerrainFamily; 6] = [
        TerrainFamily::Rough,
        TerrainFamily::Slope,
        TerrainFamily::Stairs,
        TerrainFamily::DiscreteStones,
        TerrainFamily::Gaps,
        TerrainFamily::Beams,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TerrainFamily::Rough => "Rough",
            TerrainFamily::Slope => "Slope",
            TerrainFamily::Stairs => "Stairs",
            TerrainFamily::DiscreteStones => "DiscreteStones",
            TerrainFamily::Gaps => "Gaps",
            TerrainFamily::Beams => "Beams",
            TerrainFamily::Flat => "Flat",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            TerrainFamily::Rough => 0,
            TerrainFamily::Slope => 1,
            TerrainFamily::Stairs => 2,
            TerrainFamily::DiscreteStones => 3,
            TerrainFamily::Gaps => 4,
            TerrainFamily::Beams => 5,
            TerrainFamily::Flat => 6,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [
            TerrainFamily::Rough,
            TerrainFamily::Slope,
            TerrainFamily::Stairs,
            TerrainFamily::DiscreteStones,
            TerrainFamily::Gaps,
            TerrainFamily::Beams,
            TerrainFamily::Flat,
        ]
        .get(i)
        .copied()
    }
}

impl fmt::Display for TerrainFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "rough" => TerrainFamily::Rough,
            "slope" | "slopes" => TerrainFamily::Slope,
            "stairs" => TerrainFamily::Stairs,
            "discretestones" | "discrete_stones" | "stones" => TerrainFamily::DiscreteStones,
            "gaps" => TerrainFamily::Gaps,
            "beams" => TerrainFamily::Beams,
            "flat" => TerrainFamily::Flat,
            _ => return Err(Error::Config(format!("unknown terrain family `{s}`"))),
        })
    }
}

/// Level-1 and level-10 values of each family's controlling scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainSchedule {
    /// Rough: peak height amplitude, m.
    pub rough_amplitude: Range,
    /// Slope: incline angle, degrees.
    pub slope_angle_deg: Range,
    /// Stairs: riser height, m.
    pub stair_height: Range,
    pub stair_tread: f64,
    /// Discrete stones: maximum block height, m.
    pub stone_height: Range,
    /// Discrete stones: blocks per square meter.
    pub stone_density: Range,
    /// Gaps: gap width, m.
    pub gap_width: Range,
    pub gap_depth: f64,
    /// Beams: beam top width, m (narrows with level).
    pub beam_width: Range,
    pub beam_pitch: f64,
    pub beam_drop: f64,
    pub size: f64,
    pub cell_size: f64,
}

impl Default for TerrainSchedule {
    fn default() -> Self {
        Self {
            rough_amplitude: Range::new(0.025, 0.20),
            slope_angle_deg: Range::new(5.0, 40.0),
            stair_height: Range::new(0.05, 0.20),
            stair_tread: 0.30,
            stone_height: Range::new(0.05, 0.25),
            stone_density: Range::new(0.5, 2.0),
            gap_width: Range::new(0.05, 0.40),
            gap_depth: 1.0,
            beam_width: Range::new(0.35, 0.15),
            beam_pitch: 0.50,
            beam_drop: 0.30,
            size: 8.0,
            cell_size: 0.05,
        }
    }
}

fn affine(r: Range, level: u32) -> f64 {
    let t = (level - MIN_LEVEL) as f64 / (MAX_LEVEL - MIN_LEVEL) as f64;
    r.lo + t * (r.hi - r.lo)
}

impl TerrainSchedule {
    /// Controlling scalar of a family at a level; larger means harder.
    pub fn difficulty(&self, family: TerrainFamily, level: u32) -> f64 {
        match family {
            TerrainFamily::Rough => affine(self.rough_amplitude, level),
            TerrainFamily::Slope => affine(self.slope_angle_deg, level),
            TerrainFamily::Stairs => affine(self.stair_height, level),
            TerrainFamily::DiscreteStones => affine(self.stone_height, level),
            TerrainFamily::Gaps => affine(self.gap_width, level),
            TerrainFamily::Beams => self.beam_pitch - affine(self.beam_width, level),
            TerrainFamily::Flat => 0.0,
        }
    }
}

/// Regular grid of terrain heights. `grid[iy * nx + ix]` is the height at
/// `origin + (ix, iy) * cell_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub grid: Vec<f64>,
    pub family: TerrainFamily,
    pub level: u32,
    /// Center of the spawn region.
    pub spawn: [f64; 2],
}

impl Heightfield {
    pub fn flat(size: f64, cell_size: f64) -> Self {
        let n = (size / cell_size).round() as usize + 1;
        Self {
            origin: [-0.5 * size, -0.5 * size],
            cell_size,
            nx: n,
            ny: n,
            grid: vec![0.0; n * n],
            family: TerrainFamily::Flat,
            level: MIN_LEVEL,
            spawn: [0.0, 0.0],
        }
    }

    fn from_fn(
        schedule: &TerrainSchedule,
        family: TerrainFamily,
        level: u32,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let mut hf = Self::flat(schedule.size, schedule.cell_size);
        hf.family = family;
        hf.level = level;
        for iy in 0..hf.ny {
            for ix in 0..hf.nx {
                let [x, y] = hf.node_position(ix, iy);
                hf.grid[iy * hf.nx + ix] = f(x, y);
            }
        }
        hf
    }

    pub fn node_position(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + ix as f64 * self.cell_size,
            self.origin[1] + iy as f64 * self.cell_size,
        ]
    }

    pub fn node(&self, ix: usize, iy: usize) -> f64 {
        self.grid[iy * self.nx + ix]
    }

    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + (self.nx - 1) as f64 * self.cell_size,
            self.origin[1] + (self.ny - 1) as f64 * self.cell_size,
        ]
    }

    fn cell_coords(&self, x: f64, y: f64) -> (usize, usize, f64, f64) {
        let gx = ((x - self.origin[0]) / self.cell_size).clamp(0.0, (self.nx - 1) as f64);
        let gy = ((y - self.origin[1]) / self.cell_size).clamp(0.0, (self.ny - 1) as f64);
        let ix = (gx.floor() as usize).min(self.nx - 2);
        let iy = (gy.floor() as usize).min(self.ny - 2);
        (ix, iy, gx - ix as f64, gy - iy as f64)
    }

    /// Bilinear height; points outside the grid clamp to the border.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let (ix, iy, fx, fy) = self.cell_coords(x, y);
        let h00 = self.node(ix, iy);
        let h10 = self.node(ix + 1, iy);
        let h01 = self.node(ix, iy + 1);
        let h11 = self.node(ix + 1, iy + 1);
        let h0 = h00 + fx * (h10 - h00);
        let h1 = h01 + fx * (h11 - h01);
        h0 + fy * (h1 - h0)
    }

    /// Height and gradient `(dh/dx, dh/dy)` of the bilinear surface.
    pub fn height_and_gradient(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (ix, iy, fx, fy) = self.cell_coords(x, y);
        let h00 = self.node(ix, iy);
        let h10 = self.node(ix + 1, iy);
        let h01 = self.node(ix, iy + 1);
        let h11 = self.node(ix + 1, iy + 1);
        let h0 = h00 + fx * (h10 - h00);
        let h1 = h01 + fx * (h11 - h01);
        let h = h0 + fy * (h1 - h0);
        let dx = ((h10 - h00) * (1.0 - fy) + (h11 - h01) * fy) / self.cell_size;
        let dy = (h1 - h0) / self.cell_size;
        (h, [dx, dy])
    }

    /// Upward unit surface normal.
    pub fn normal_at(&self, x: f64, y: f64) -> [f64; 3] {
        let (_, [dx, dy]) = self.height_and_gradient(x, y);
        let n = (dx * dx + dy * dy + 1.0).sqrt();
        [-dx / n, -dy / n, 1.0 / n]
    }

    /// Largest height within `radius` of `(x, y)` (grid nodes only).
    pub fn max_height_near(&self, x: f64, y: f64, radius: f64) -> f64 {
        let r_cells = (radius / self.cell_size).ceil() as isize + 1;
        let cx = ((x - self.origin[0]) / self.cell_size).round() as isize;
        let cy = ((y - self.origin[1]) / self.cell_size).round() as isize;
        let mut best = self.height_at(x, y);
        for iy in (cy - r_cells).max(0)..=(cy + r_cells).min(self.ny as isize - 1) {
            for ix in (cx - r_cells).max(0)..=(cx + r_cells).min(self.nx as isize - 1) {
                let [px, py] = self.node_position(ix as usize, iy as usize);
                if (px - x).hypot(py - y) <= radius {
                    best = best.max(self.node(ix as usize, iy as usize));
                }
            }
        }
        best
    }
}

/// Builds a terrain of `family` at `level`; pure in `(family, level, seed)`.
pub fn generate(
    schedule: &TerrainSchedule,
    family: TerrainFamily,
    level: u32,
    seed: u64,
) -> Result<Heightfield> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        return Err(Error::InvalidLevel(level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((family.index() as u64) << 56) ^ ((level as u64) << 48),
    );
    let d = schedule.difficulty(family, level);
    let hf = match family {
        TerrainFamily::Flat => {
            let mut hf = Heightfield::flat(schedule.size, schedule.cell_size);
            hf.level = level;
            hf
        }
        TerrainFamily::Rough => {
            // Uniform noise on a coarse lattice, bilinearly refined.
            let coarse = 0.2;
            let n = (schedule.size / coarse).ceil() as usize + 2;
            let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-d..=d)).collect();
            let half = 0.5 * schedule.size;
            Heightfield::from_fn(schedule, family, level, |x, y| {
                let gx = (x + half) / coarse;
                let gy = (y + half) / coarse;
                let ix = (gx.floor() as usize).min(n - 2);
                let iy = (gy.floor() as usize).min(n - 2);
                let (fx, fy) = (gx - ix as f64, gy - iy as f64);
                let h = |i: usize, j: usize| lattice[j * n + i];
                let h0 = h(ix, iy) + fx * (h(ix + 1, iy) - h(ix, iy));
                let h1 = h(ix, iy + 1) + fx * (h(ix + 1, iy + 1) - h(ix, iy + 1));
                h0 + fy * (h1 - h0)
            })
        }
        TerrainFamily::Slope => {
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let grade = d.to_radians().tan();
            let (c, s) = (phi.cos(), phi.sin());
            Heightfield::from_fn(schedule, family, level, |x, y| grade * (c * x + s * y))
        }
        TerrainFamily::Stairs => {
            let tread = schedule.stair_tread;
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let phase: f64 = rng.gen_range(0.0..tread);
            let along_x = rng.gen_bool(0.5);
            Heightfield::from_fn(schedule, family, level, |x, y| {
                let u = if along_x { x } else { y };
                d * ((dir * u + phase) / tread).floor()
            })
        }
        TerrainFamily::DiscreteStones => {
            let density = affine(schedule.stone_density, level);
            let count = (density * schedule.size * schedule.size).round() as usize;
            let half = 0.5 * schedule.size;
            let stones: Vec<[f64; 5]> = (0..count)
                .map(|_| {
                    let cx = rng.gen_range(-half..half);
                    let cy = rng.gen_range(-half..half);
                    let w = rng.gen_range(0.2..0.5);
                    let l = rng.gen_range(0.2..0.5);
                    let h = rng.gen_range(0.3 * d..=d);
                    [cx, cy, w, l, h]
                })
                .collect();
            Heightfield::from_fn(schedule, family, level, |x, y| {
                stones
                    .iter()
                    .filter(|s| (x - s[0]).abs() <= 0.5 * s[2] && (y - s[1]).abs() <= 0.5 * s[3])
                    .fold(0.0, |acc: f64, s| acc.max(s[4]))
            })
        }
        TerrainFamily::Gaps => {
            let platform = rng.gen_range(0.8..1.2);
            let period = platform + d;
            // Spawn sits at the middle of a platform.
            let offset = d + 0.5 * platform;
            let depth = schedule.gap_depth;
            Heightfield::from_fn(schedule, family, level, |x, y| {
                let lx = (x + offset).rem_euclid(period);
                let ly = (y + offset).rem_euclid(period);
                if lx < d || ly < d {
                    -depth
                } else {
                    0.0
                }
            })
        }
        TerrainFamily::Beams => {
            let width = affine(schedule.beam_width, level);
            let pitch = schedule.beam_pitch;
            let offset: f64 = rng.gen_range(-0.5 * width..0.5 * width);
            let along_x = rng.gen_bool(0.5);
            let drop = schedule.beam_drop;
            Heightfield::from_fn(schedule, family, level, |x, y| {
                let u = if along_x { y } else { x };
                let local = (u + offset + 0.5 * width).rem_euclid(pitch);
                if local <= width {
                    0.0
                } else {
                    -drop
                }
            })
        }
    };
    Ok(hf)
}

/// Curriculum position of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub family: TerrainFamily,
    pub level: u32,
    pub promotions: u64,
    pub demotions: u64,
    pub resamples: u64,
}

impl CurriculumState {
    pub fn new(family: TerrainFamily, level: u32) -> Self {
        Self {
            family,
            level: level.clamp(MIN_LEVEL, MAX_LEVEL),
            promotions: 0,
            demotions: 0,
            resamples: 0,
        }
    }

    /// Promote on success with displacement under 1 m, demote on failure.
    /// A success at the top level resamples a uniform level instead.
    pub fn update_level<R: Rng + ?Sized>(
        &mut self,
        episode_success: bool,
        displacement: f64,
        rng: &mut R,
    ) {
        if episode_success && displacement < 1.0 {
            if self.level >= MAX_LEVEL {
                self.level = rng.gen_range(MIN_LEVEL..=MAX_LEVEL);
                self.resamples += 1;
            } else {
                self.level += 1;
                self.promotions += 1;
            }
        } else if !episode_success {
            if self.level > MIN_LEVEL {
                self.level -= 1;
            }
            self.demotions += 1;
        }
        debug_assert!((MIN_LEVEL..=MAX_LEVEL).contains(&self.level));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> TerrainSchedule {
        TerrainSchedule::default()
    }

    #[test]
    fn rough_level_one_amplitude() {
        for seed in 0..5 {
            let hf = generate(&sched(), TerrainFamily::Rough, 1, seed).unwrap();
            let max = hf.grid.iter().fold(0.0f64, |a, h| a.max(h.abs()));
            assert!(max <= 0.025 + 1e-12, "max {max}");
            assert!(max > 0.01);
        }
    }

    #[test]
    fn slope_level_ten_is_forty_degrees() {
        let hf = generate(&sched(), TerrainFamily::Slope, 10, 3).unwrap();
        let (_, [dx, dy]) = hf.height_and_gradient(0.13, -0.41);
        let angle = dx.hypot(dy).atan().to_degrees();
        assert!((angle - 40.0).abs() < 1e-9, "angle {angle}");
    }

    #[test]
    fn flat_is_zero() {
        for level in 1..=10 {
            let hf = generate(&sched(), TerrainFamily::Flat, level, 9).unwrap();
            for (x, y) in [(0.0, 0.0), (1.3, -2.2), (10.0, 10.0)] {
                assert_eq!(hf.height_at(x, y), 0.0);
            }
        }
    }

    #[test]
    fn invalid_level_rejected() {
        assert!(matches!(
            generate(&sched(), TerrainFamily::Rough, 0, 1),
            Err(Error::InvalidLevel(0))
        ));
        assert!(generate(&sched(), TerrainFamily::Gaps, 11, 1).is_err());
    }

    #[test]
    fn bilinear_interpolation() {
        let mut hf = Heightfield::flat(1.0, 0.5);
        // node (1, 0) -> 0.2
        hf.grid[1] = 0.2;
        let [x0, y0] = hf.node_position(0, 0);
        let [x1, _] = hf.node_position(1, 0);
        assert_eq!(hf.height_at(x1, y0), 0.2);
        assert!((hf.height_at(0.5 * (x0 + x1), y0) - 0.1).abs() < 1e-15);
        // outside clamps to the border
        assert_eq!(hf.height_at(-100.0, -100.0), 0.0);
    }

    #[test]
    fn generation_is_pure() {
        for family in TerrainFamily::EVAL {
            let a = generate(&sched(), family, 6, 42).unwrap();
            let b = generate(&sched(), family, 6, 42).unwrap();
            assert_eq!(a, b);
            assert!(a.grid.iter().all(|h| h.is_finite()));
        }
    }

    #[test]
    fn difficulty_monotone_in_level() {
        let s = sched();
        for family in TerrainFamily::EVAL {
            for level in 1..10 {
                assert!(s.difficulty(family, level + 1) >= s.difficulty(family, level));
            }
        }
    }

    #[test]
    fn gaps_spawn_on_platform() {
        for level in 1..=10 {
            let hf = generate(&sched(), TerrainFamily::Gaps, level, 17).unwrap();
            assert_eq!(hf.height_at(0.0, 0.0), 0.0);
        }
    }

    #[test]
    fn curriculum_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cs = CurriculumState::new(TerrainFamily::Rough, 3);
        cs.update_level(true, 0.3, &mut rng);
        assert_eq!(cs.level, 4);
        let mut cs = CurriculumState::new(TerrainFamily::Rough, 1);
        cs.update_level(false, 0.3, &mut rng);
        assert_eq!(cs.level, 1);
        let mut cs = CurriculumState::new(TerrainFamily::Rough, 5);
        cs.update_level(false, 0.3, &mut rng);
        assert_eq!(cs.level, 4);
    }

    #[test]
    fn resample_at_cap_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let mut cs = CurriculumState::new(TerrainFamily::Beams, 10);
            cs.update_level(true, 0.2, &mut rng);
            counts[(cs.level - 1) as usize] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts {counts:?}");
    }
}
