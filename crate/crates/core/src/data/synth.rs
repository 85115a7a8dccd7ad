//! Goal-directed walkers in a square world with destinations on its boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{GtpError, Result};
use crate::geometry::{normalize_angle, BBox, Point};
use crate::scene::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_dest: usize,
    pub n_trajectories: usize,
    /// Per-step heading noise (radians).
    pub sigma: f64,
    /// Side of the square world (metres).
    pub world_size: f64,
    /// Walking speed (m/s).
    pub speed: f64,
    /// Seconds per step.
    pub dt: f64,
    /// Fraction of heading error corrected per step.
    pub steering: f64,
    /// Chance of a mid-course waypoint (only when `sigma > 0`).
    pub waypoint_prob: f64,
    /// Frame ids advance by this much per step.
    pub frame_stride: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_dest: 6,
            n_trajectories: 1000,
            sigma: 0.1,
            world_size: 20.0,
            speed: 1.2,
            dt: 0.4,
            steering: 0.2,
            waypoint_prob: 0.3,
            frame_stride: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub scene: SceneSpec,
    pub trajectories: Vec<Trajectory>,
    /// Destination (1-based) each walker was sent to.
    pub goals: Vec<usize>,
}

const SPAWN_MARGIN: f64 = 2.0;
const WAYPOINT_RADIUS: f64 = 1.0;
/// Lateral waypoint offset as a fraction of the start-to-target distance.
const WAYPOINT_OFFSET: f64 = 0.3;

/// Boxes spread evenly along the perimeter, each touching the boundary.
fn destination_boxes(n: usize, w: f64) -> Result<Vec<BBox>> {
    let perimeter = 4.0 * w;
    let len = (0.15 * w).min(perimeter / (2.0 * n as f64));
    let depth = (0.075 * w).min(len);
    let lo = 0.5 * len + 0.5;
    let hi = w - 0.5 * len - 0.5;
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let s = (i as f64 + 0.25) * perimeter / n as f64;
        let edge = (s / w).floor() as usize % 4;
        let along = (s - edge as f64 * w).clamp(lo, hi);
        let b = match edge {
            0 => BBox::new(along - 0.5 * len, 0.0, along + 0.5 * len, depth),
            1 => BBox::new(w - depth, along - 0.5 * len, w, along + 0.5 * len),
            2 => BBox::new(w - along - 0.5 * len, w - depth, w - along + 0.5 * len, w),
            _ => BBox::new(0.0, w - along - 0.5 * len, depth, w - along + 0.5 * len),
        }?;
        boxes.push(b);
    }
    Ok(boxes)
}

fn uniform_in(rng: &mut ChaCha8Rng, b: &BBox, margin: f64) -> Point {
    let mx = margin.min(0.5 * (b.x_max - b.x_min));
    let my = margin.min(0.5 * (b.y_max - b.y_min));
    Point::new(
        rng.random_range(b.x_min + mx..=b.x_max - mx),
        rng.random_range(b.y_min + my..=b.y_max - my),
    )
}

/// Generates a scene and `n_trajectories` walkers. Each walker spawns at an
/// interior point, picks a destination and a target point inside it, and
/// steers toward it (possibly via a waypoint) at constant speed until it
/// enters the destination box. With `sigma = 0` paths are straight lines.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_dest < 2 || cfg.n_dest > 32 {
        return Err(GtpError::contract(format!("synthetic n_dest {} outside 2..=32", cfg.n_dest)));
    }
    if !(cfg.world_size > 2.0 * SPAWN_MARGIN && cfg.speed > 0.0 && cfg.dt > 0.0 && cfg.sigma >= 0.0) {
        return Err(GtpError::contract("synthetic world parameters out of range"));
    }
    let w = cfg.world_size;
    let boxes = destination_boxes(cfg.n_dest, w)?;
    let scene = SceneSpec::from_world_boxes(format!("synth-{}", cfg.seed), &boxes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let interior = BBox::new(0.0, 0.0, w, w)?;
    let step = cfg.speed * cfg.dt;
    let max_steps = (8.0 * w / step).ceil() as usize;

    let mut trajectories = Vec::with_capacity(cfg.n_trajectories);
    let mut goals = Vec::with_capacity(cfg.n_trajectories);
    for k in 0..cfg.n_trajectories {
        let start = uniform_in(&mut rng, &interior, SPAWN_MARGIN);
        let goal = rng.random_range(0..cfg.n_dest);
        let target = uniform_in(&mut rng, &boxes[goal], 0.2);
        let mut route = vec![target];
        if cfg.sigma > 0.0 && rng.random_bool(cfg.waypoint_prob) {
            // a detour point beside the straight route, kept inside the spawn area
            let d = target.sub(start);
            let along = rng.random_range(0.3..=0.7);
            let side = rng.random_range(-WAYPOINT_OFFSET..=WAYPOINT_OFFSET);
            let p = Point::new(start.x + along * d.x - side * d.y, start.y + along * d.y + side * d.x);
            let lo = SPAWN_MARGIN;
            let hi = w - SPAWN_MARGIN;
            route.insert(0, Point::new(p.x.clamp(lo, hi), p.y.clamp(lo, hi)));
        }
        let mut pos = start;
        let mut points = vec![pos];
        let first = route[0].sub(pos);
        let mut heading = first.y.atan2(first.x);
        while points.len() < max_steps && !boxes[goal].contains(pos) {
            if route.len() > 1 && pos.dist(route[0]) < WAYPOINT_RADIUS {
                route.remove(0);
            }
            let to = route[0].sub(pos);
            let bearing = to.y.atan2(to.x);
            if cfg.sigma > 0.0 {
                heading += cfg.steering * normalize_angle(bearing - heading) + noise.sample(&mut rng);
                heading = normalize_angle(heading);
            } else {
                heading = bearing;
            }
            let (s, c) = heading.sin_cos();
            pos = Point::new((pos.x + step * c).clamp(0.0, w), (pos.y + step * s).clamp(0.0, w));
            points.push(pos);
        }
        let base = rng.random_range(0..1000i64) * cfg.frame_stride;
        let frames = (0..points.len() as i64).map(|i| base + i * cfg.frame_stride).collect();
        trajectories.push(Trajectory::new(k as i64 + 1, frames, points)?);
        goals.push(goal + 1);
    }
    Ok(SynthDataset {
        scene,
        trajectories,
        goals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::assign_ground_truth_goal;

    fn recovery(ds: &SynthDataset) -> f64 {
        let hits = ds
            .trajectories
            .iter()
            .zip(&ds.goals)
            .filter(|(t, g)| assign_ground_truth_goal(&t.points, &ds.scene).unwrap() == **g)
            .count();
        hits as f64 / ds.goals.len() as f64
    }

    #[test]
    fn noiseless_paths_are_straight_and_labelled() {
        let ds = synth_generate(&SynthConfig {
            sigma: 0.0,
            n_trajectories: 200,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(recovery(&ds), 1.0);
        for t in &ds.trajectories {
            let (a, b) = (t.points[0], *t.points.last().unwrap());
            let d = b.sub(a);
            let len = d.norm();
            for p in &t.points {
                let q = p.sub(a);
                let off = (q.x * d.y - q.y * d.x).abs() / len;
                assert!(off < 1e-9, "point off line by {off}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            seed: 3,
            n_trajectories: 50,
            ..Default::default()
        };
        let (a, b) = (synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.goals, b.goals);
        let c = synth_generate(&SynthConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.trajectories, c.trajectories);
    }

    #[test]
    fn noisy_goal_recovery() {
        let ds = synth_generate(&SynthConfig {
            sigma: 0.1,
            n_trajectories: 1000,
            ..Default::default()
        })
        .unwrap();
        assert!(recovery(&ds) >= 0.95);
    }

    #[test]
    fn boxes_touch_boundary_and_do_not_overlap() {
        for n in [2, 6, 12, 32] {
            let b = destination_boxes(n, 20.0).unwrap();
            for (i, x) in b.iter().enumerate() {
                assert!(x.x_min <= 0.0 || x.y_min <= 0.0 || x.x_max >= 20.0 || x.y_max >= 20.0);
                for y in &b[i + 1..] {
                    let overlap = x.x_min < y.x_max && y.x_min < x.x_max && x.y_min < y.y_max && y.y_min < x.y_max;
                    assert!(!overlap, "n={n}: {x:?} overlaps {y:?}");
                }
            }
        }
    }
}
