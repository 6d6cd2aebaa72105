//! Reference regeneration for escaping receding-horizon local minima.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::nmpc::Obstacle;

use super::reference::{generate_reference, ReferenceTrajectory};
use super::world::WorldModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegenerationConfig {
    pub enabled: bool,
    /// Deviation from the remaining reference that triggers regeneration, meters.
    pub threshold: f64,
    /// Extra lateral clearance added to the safe distance, meters.
    pub margin: f64,
    pub max_stagnant: usize,
    /// Required decrease in goal distance between regenerations, meters.
    pub min_progress: f64,
}

impl Default for RegenerationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 2.0,
            margin: 0.5,
            max_stagnant: 5,
            min_progress: 0.5,
        }
    }
}

impl RegenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("regeneration.threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.margin >= 0.0) || !(self.min_progress >= 0.0) || self.max_stagnant == 0 {
            return Err(Error::Config("regeneration margin/progress must be >= 0 and max_stagnant >= 1".into()));
        }
        Ok(())
    }
}

/// Geometry shared by every regeneration in a run.
#[derive(Debug, Clone, Copy)]
pub struct DetourParams {
    pub d_o: f64,
    pub margin: f64,
    pub v_max: f64,
    pub dt: f64,
}

const LATERAL_STEP: f64 = 0.5;
const MAX_LATERAL_STEPS: usize = 40;
const MIN_LEG: f64 = 1e-3;

fn segment_distance(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> (f64, f64) {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((a + d * s - p).norm(), s)
}

fn min_clearance(reference: &ReferenceTrajectory, obstacles: &[Obstacle]) -> f64 {
    reference
        .samples()
        .iter()
        .flat_map(|s| obstacles.iter().map(move |o| (o.center - s.x.p).norm()))
        .fold(f64::INFINITY, f64::min)
}

fn straight_waypoints(start: &Vector3<f64>, goal: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let d = goal - start;
    vec![*start, start + d / 3.0, start + d * (2.0 / 3.0), *goal]
}

/// New reference from `start` to `goal` that passes the given obstacles
/// laterally at `d_o + margin` when the straight line is blocked.
pub fn detour_reference(
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
    obstacles: &[Obstacle],
    params: &DetourParams,
) -> Result<ReferenceTrajectory> {
    let dir = goal - start;
    let length = dir.norm();
    if length < 4.0 * MIN_LEG {
        return Err(Error::Domain("start and goal coincide; nothing to regenerate".into()));
    }
    let clearance = params.d_o + params.margin;
    let along = dir / length;
    let blocking: Vec<&Obstacle> = obstacles
        .iter()
        .filter(|o| segment_distance(start, goal, &o.center).0 < clearance)
        .collect();
    let straight = generate_reference(&straight_waypoints(start, goal), params.v_max, params.dt)?;
    if blocking.is_empty() && min_clearance(&straight, obstacles) >= clearance {
        return Ok(straight);
    }

    let horizontal = Vector3::new(along.x, along.y, 0.0);
    let lateral = if horizontal.norm() > 1e-9 {
        Vector3::new(-horizontal.y, horizontal.x, 0.0).normalize()
    } else {
        Vector3::x()
    };
    let projections: Vec<f64> = blocking.iter().map(|o| (o.center - start).dot(&along)).collect();
    let lo = projections.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = projections.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, length) };
    let enter = (lo - clearance).clamp(0.0, length);
    let leave = (hi + clearance).clamp(enter + MIN_LEG, length);

    // Try the side the blocking obstacles lean away from first.
    let lean: f64 = blocking.iter().map(|o| (o.center - start).dot(&lateral)).sum();
    let first = if lean > 0.0 { -1.0 } else { 1.0 };

    let mut best: Option<(f64, ReferenceTrajectory)> = None;
    for step in 1..=MAX_LATERAL_STEPS {
        for sign in [first, -first] {
            let offset = lateral * (sign * LATERAL_STEP * step as f64);
            let mut waypoints = vec![*start];
            let a = start + along * enter + offset;
            let b = start + along * leave + offset;
            for w in [a, b] {
                if (w - waypoints[waypoints.len() - 1]).norm() >= MIN_LEG {
                    waypoints.push(w);
                }
            }
            if (goal - waypoints[waypoints.len() - 1]).norm() < MIN_LEG {
                waypoints.pop();
            }
            waypoints.push(*goal);
            while waypoints.len() < 4 {
                let n = waypoints.len();
                let mid = (waypoints[n - 2] + waypoints[n - 1]) / 2.0;
                waypoints.insert(n - 1, mid);
            }
            let candidate = generate_reference(&waypoints, params.v_max, params.dt)?;
            let c = min_clearance(&candidate, obstacles);
            if c >= clearance {
                return Ok(candidate);
            }
            if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
                best = Some((c, candidate));
            }
        }
    }
    log::warn!("no detour reaches the requested clearance; using the widest one");
    Ok(best.map(|(_, r)| r).unwrap_or(straight))
}

/// Regenerates when `x_actual` is farther than `threshold` from every
/// reference sample from index `from` onward. Returns `None` when the
/// reference stays as it is.
pub fn maybe_regenerate(
    reference: &ReferenceTrajectory,
    from: usize,
    x_actual: &State,
    threshold: f64,
    world: &WorldModel,
    params: &DetourParams,
) -> Result<Option<ReferenceTrajectory>> {
    let (_, deviation) = reference.nearest_from(from, &x_actual.p);
    if deviation <= threshold {
        return Ok(None);
    }
    let visible = world.visible_obstacles(&x_actual.p);
    detour_reference(&x_actual.p, &world.goal, &visible, params).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegenOutcome {
    Unchanged,
    Regenerated(ReferenceTrajectory),
    /// Too many regenerations without getting closer to the goal.
    Unreachable,
}

/// Tracks regenerations over a run and flags stagnation.
#[derive(Debug, Clone)]
pub struct Regenerator {
    cfg: RegenerationConfig,
    params: DetourParams,
    count: usize,
    stagnant: usize,
    last_goal_distance: Option<f64>,
}

impl Regenerator {
    pub fn new(cfg: RegenerationConfig, params: DetourParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            params,
            count: 0,
            stagnant: 0,
            last_goal_distance: None,
        })
    }

    /// Goal distance at the start of the run, used as the first progress mark.
    pub fn start(&mut self, p: &Vector3<f64>, goal: &Vector3<f64>) {
        self.last_goal_distance = Some((goal - p).norm());
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn stagnant(&self) -> usize {
        self.stagnant
    }

    pub fn step(
        &mut self,
        reference: &ReferenceTrajectory,
        from: usize,
        x_actual: &State,
        world: &WorldModel,
    ) -> Result<RegenOutcome> {
        if !self.cfg.enabled {
            return Ok(RegenOutcome::Unchanged);
        }
        let Some(new_ref) = maybe_regenerate(reference, from, x_actual, self.cfg.threshold, world, &self.params)? else {
            return Ok(RegenOutcome::Unchanged);
        };
        self.count += 1;
        let dist = (world.goal - x_actual.p).norm();
        let progress = self.last_goal_distance.map_or(f64::INFINITY, |d| d - dist);
        self.last_goal_distance = Some(dist);
        if progress < self.cfg.min_progress {
            self.stagnant += 1;
        } else {
            self.stagnant = 0;
        }
        if self.stagnant >= self.cfg.max_stagnant {
            return Ok(RegenOutcome::Unreachable);
        }
        Ok(RegenOutcome::Regenerated(new_ref))
    }
}
