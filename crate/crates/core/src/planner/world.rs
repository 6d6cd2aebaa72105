//! Known point-obstacle worlds with a sensing window.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmpc::Obstacle;

pub const DEFAULT_SENSING_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub obstacles: Vec<Obstacle>,
    pub sensing_radius: f64,
    pub goal: Vector3<f64>,
}

impl WorldModel {
    pub fn new(obstacles: Vec<Obstacle>, sensing_radius: f64, goal: Vector3<f64>) -> Result<Self> {
        if !(sensing_radius > 0.0) {
            return Err(Error::Domain(format!("sensing radius must be positive, got {sensing_radius}")));
        }
        if !goal.iter().all(|c| c.is_finite()) {
            return Err(Error::Domain("goal is not finite".into()));
        }
        Ok(Self {
            obstacles,
            sensing_radius,
            goal,
        })
    }

    pub fn empty(goal: Vector3<f64>) -> Self {
        Self {
            obstacles: Vec::new(),
            sensing_radius: DEFAULT_SENSING_RADIUS,
            goal,
        }
    }

    /// Obstacles inside the closed sensing ball around `p`.
    pub fn visible_obstacles(&self, p: &Vector3<f64>) -> Vec<Obstacle> {
        visible_obstacles(self, p)
    }

    /// Smallest distance from `p` to any obstacle, or infinity.
    pub fn clearance(&self, p: &Vector3<f64>) -> f64 {
        self.obstacles
            .iter()
            .map(|o| (o.center - p).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn visible_obstacles(world: &WorldModel, p: &Vector3<f64>) -> Vec<Obstacle> {
    world
        .obstacles
        .iter()
        .filter(|o| (o.center - p).norm() <= world.sensing_radius)
        .copied()
        .collect()
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.max[k] > self.min[k]) {
                return Err(Error::Config(format!("bounds axis {k}: max must exceed min")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [0.0, 0.0, 0.0],
            max: [20.0, 20.0, 5.0],
        }
    }
}

/// Seeded scatter of point obstacles kept clear of the start and goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestSpec {
    pub bounds: Bounds,
    pub obstacle_count: usize,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// No obstacle is placed closer than this to the start or goal.
    pub keep_out: f64,
    /// Minimum distance between any two obstacles.
    pub min_spacing: f64,
    pub sensing_radius: f64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            obstacle_count: 15,
            start: [1.0, 1.0, 2.5],
            goal: [19.0, 19.0, 2.5],
            keep_out: 2.5,
            min_spacing: 3.0,
            sensing_radius: DEFAULT_SENSING_RADIUS,
        }
    }
}

pub fn random_forest(spec: &ForestSpec, seed: u64) -> Result<WorldModel> {
    spec.bounds.validate()?;
    let start = Vector3::from(spec.start);
    let goal = Vector3::from(spec.goal);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(spec.obstacle_count);
    let max_tries = 10_000 * spec.obstacle_count.max(1);
    let mut tries = 0;
    while obstacles.len() < spec.obstacle_count {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Config(format!(
                "could not place {} obstacles with the requested spacing",
                spec.obstacle_count
            )));
        }
        let c = Vector3::from_fn(|k, _| rng.random_range(spec.bounds.min[k]..spec.bounds.max[k]));
        if (c - start).norm() < spec.keep_out || (c - goal).norm() < spec.keep_out {
            continue;
        }
        if obstacles.iter().any(|o| (o.center - c).norm() < spec.min_spacing) {
            continue;
        }
        obstacles.push(Obstacle::new(c)?);
    }
    WorldModel::new(obstacles, spec.sensing_radius, goal)
}

/// Planar grid of obstacles across the straight path from `start` to `goal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    pub start: [f64; 3],
    pub goal: [f64; 3],
    /// Fraction of the start-goal distance at which the wall stands.
    pub position: f64,
    pub half_width: f64,
    pub z_range: [f64; 2],
    pub spacing: f64,
    pub sensing_radius: f64,
}

impl Default for WallSpec {
    fn default() -> Self {
        Self {
            start: [2.0, 10.0, 2.5],
            goal: [18.0, 10.0, 2.5],
            position: 0.5,
            half_width: 3.0,
            z_range: [0.5, 4.5],
            spacing: 1.0,
            sensing_radius: DEFAULT_SENSING_RADIUS,
        }
    }
}

pub fn wall_world(spec: &WallSpec) -> Result<WorldModel> {
    let start = Vector3::from(spec.start);
    let goal = Vector3::from(spec.goal);
    let dir = goal - start;
    let horizontal = Vector3::new(dir.x, dir.y, 0.0);
    if horizontal.norm() < 1e-9 || !(spec.spacing > 0.0) || spec.z_range[1] < spec.z_range[0] {
        return Err(Error::Config("wall needs a horizontal start-goal direction and positive spacing".into()));
    }
    let lateral = Vector3::new(-horizontal.y, horizontal.x, 0.0).normalize();
    let base = start + dir * spec.position;
    let cols = (2.0 * spec.half_width / spec.spacing).round() as i64;
    let rows = ((spec.z_range[1] - spec.z_range[0]) / spec.spacing).round() as i64;
    let mut obstacles = Vec::new();
    for i in 0..=cols {
        let off = -spec.half_width + spec.spacing * i as f64;
        for j in 0..=rows {
            let z = spec.z_range[0] + spec.spacing * j as f64;
            let mut c = base + lateral * off;
            c.z = z;
            obstacles.push(Obstacle::new(c)?);
        }
    }
    WorldModel::new(obstacles, spec.sensing_radius, goal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensing_window_is_a_closed_ball() {
        let empty = WorldModel::empty(Vector3::zeros());
        assert!(empty.visible_obstacles(&Vector3::zeros()).is_empty());

        let w = WorldModel::new(
            vec![Obstacle::at(2.0, 0.0, 0.0), Obstacle::at(4.0, 0.0, 0.0), Obstacle::at(6.0, 0.0, 0.0)],
            5.0,
            Vector3::zeros(),
        )
        .unwrap();
        let seen = w.visible_obstacles(&Vector3::zeros());
        assert_eq!(seen, vec![Obstacle::at(2.0, 0.0, 0.0), Obstacle::at(4.0, 0.0, 0.0)]);

        let edge = WorldModel::new(vec![Obstacle::at(0.0, 5.0, 0.0)], 5.0, Vector3::zeros()).unwrap();
        assert_eq!(edge.visible_obstacles(&Vector3::zeros()).len(), 1);
    }

    #[test]
    fn forest_is_seeded_and_respects_keep_out() {
        let spec = ForestSpec::default();
        let a = random_forest(&spec, 7).unwrap();
        let b = random_forest(&spec, 7).unwrap();
        let c = random_forest(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.obstacles.len(), 15);
        for o in &a.obstacles {
            assert!(spec.bounds.contains(&o.center));
            assert!((o.center - Vector3::from(spec.start)).norm() >= spec.keep_out);
            assert!((o.center - Vector3::from(spec.goal)).norm() >= spec.keep_out);
        }
    }

    #[test]
    fn wall_blocks_the_straight_path() {
        let w = wall_world(&WallSpec::default()).unwrap();
        assert_eq!(w.obstacles.len(), 7 * 5);
        let mid = Vector3::new(10.0, 10.0, 2.5);
        assert!(w.clearance(&mid) < 1.0);
    }

    #[test]
    fn non_positive_sensing_radius_is_rejected() {
        assert!(WorldModel::new(Vec::new(), 0.0, Vector3::zeros()).is_err());
    }
}
