//! Closed-loop simulation: NMPC on the planner model, true plant in the loop.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{plant_step, rk4_vector, AugmentedModel, ControlInput, NominalModel, PlantConfig, State};
use crate::error::{Error, Result};
use crate::nmpc::{NmpcConfig, NmpcSolver, SolveStatus};
use crate::residual::ResidualModel;

use super::reference::ReferenceTrajectory;
use super::regenerate::{DetourParams, RegenOutcome, RegenerationConfig, Regenerator};
use super::world::WorldModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nmpc: NmpcConfig,
    pub regeneration: RegenerationConfig,
    /// Distance to the goal that ends a run successfully, meters.
    pub goal_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nmpc: NmpcConfig::default(),
            regeneration: RegenerationConfig::default(),
            goal_tolerance: 0.3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.nmpc.validate()?;
        self.regeneration.validate()?;
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::Config(format!("goal_tolerance must be > 0, got {}", self.goal_tolerance)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalReached,
    MaxSteps,
    Unreachable,
}

/// One control application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: State,
    pub control: ControlInput,
    /// Planner-model prediction of the next state.
    pub predicted: State,
    /// Plant state at the end of the interval.
    pub actual: State,
    /// Plant world-frame velocity at the end of the interval.
    pub v_hat: Vector3<f64>,
    /// Reference position the step was tracking.
    pub reference: Vector3<f64>,
    pub solve_time: f64,
    pub sqp_iters: usize,
    pub status: SolveStatus,
    pub regenerated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub dt: f64,
    pub steps: Vec<StepRecord>,
    /// `None` for logs read back from CSV.
    pub termination: Option<Termination>,
    pub regenerations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub success: bool,
    pub termination: Option<Termination>,
    pub steps: usize,
    pub duration: f64,
    /// Position RMSE against the tracked reference samples, meters.
    pub position_rmse: f64,
    pub final_goal_distance: f64,
    /// Smallest distance from the flown path to any obstacle; absent without obstacles.
    pub min_clearance: Option<f64>,
    pub traversed_distance: f64,
    pub regenerations: usize,
    pub median_solve_time: f64,
    pub max_solve_time: f64,
    pub mean_sqp_iters: f64,
    pub converged_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const CSV_HEADER: [&str; 27] = [
    "t", "x", "y", "z", "yaw", "u_vx", "u_vy", "u_vz", "u_omega", "pred_x", "pred_y", "pred_z", "pred_yaw", "next_x",
    "next_y", "next_z", "next_yaw", "vhat_x", "vhat_y", "vhat_z", "ref_x", "ref_y", "ref_z", "solve_time", "sqp_iters",
    "status", "regenerated",
];

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIters => "max-iters",
        SolveStatus::InfeasibleQp => "infeasible-qp",
    }
}

fn parse_status(s: &str) -> Option<SolveStatus> {
    match s {
        "converged" => Some(SolveStatus::Converged),
        "max-iters" => Some(SolveStatus::MaxIters),
        "infeasible-qp" => Some(SolveStatus::InfeasibleQp),
        _ => None,
    }
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Positions visited: every start state plus the final actual state.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        let mut out: Vec<_> = self.steps.iter().map(|s| s.state.p).collect();
        if let Some(last) = self.steps.last() {
            out.push(last.actual.p);
        }
        out
    }

    pub fn position_rmse(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.steps.iter().map(|s| (s.state.p - s.reference).norm_squared()).sum();
        (sum / self.steps.len() as f64).sqrt()
    }

    pub fn summary(&self, world: &WorldModel) -> RunSummary {
        let positions = self.positions();
        let final_p = positions.last().copied().unwrap_or(world.goal);
        let min_clearance = if world.obstacles.is_empty() {
            None
        } else {
            Some(positions.iter().map(|p| world.clearance(p)).fold(f64::INFINITY, f64::min))
        };
        let traversed = positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let mut times: Vec<f64> = self.steps.iter().map(|s| s.solve_time).collect();
        let max_solve_time = times.iter().copied().fold(0.0, f64::max);
        let n = self.steps.len().max(1) as f64;
        RunSummary {
            success: self.termination == Some(Termination::GoalReached),
            termination: self.termination,
            steps: self.steps.len(),
            duration: self.dt * self.steps.len() as f64,
            position_rmse: self.position_rmse(),
            final_goal_distance: (final_p - world.goal).norm(),
            min_clearance,
            traversed_distance: traversed,
            regenerations: self.regenerations,
            median_solve_time: median(&mut times),
            max_solve_time,
            mean_sqp_iters: self.steps.iter().map(|s| s.sqp_iters as f64).sum::<f64>() / n,
            converged_fraction: self.steps.iter().filter(|s| s.status == SolveStatus::Converged).count() as f64 / n,
            config_hash: None,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for s in &self.steps {
            let nums = [
                s.t,
                s.state.p.x,
                s.state.p.y,
                s.state.p.z,
                s.state.alpha,
                s.control.v.x,
                s.control.v.y,
                s.control.v.z,
                s.control.omega,
                s.predicted.p.x,
                s.predicted.p.y,
                s.predicted.p.z,
                s.predicted.alpha,
                s.actual.p.x,
                s.actual.p.y,
                s.actual.p.z,
                s.actual.alpha,
                s.v_hat.x,
                s.v_hat.y,
                s.v_hat.z,
                s.reference.x,
                s.reference.y,
                s.reference.z,
                s.solve_time,
            ];
            let mut row: Vec<String> = nums.iter().map(|v| v.to_string()).collect();
            row.push(s.sqp_iters.to_string());
            row.push(status_name(s.status).to_string());
            row.push(u8::from(s.regenerated).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a log written by [`write_csv`](Self::write_csv). Columns are
    /// located by name; a missing column is a data error.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        let col = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("run log is missing column `{name}`")))
        };
        let cols: Vec<usize> = CSV_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
        let mut steps = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |j: usize| -> Result<&str> {
                rec.get(cols[j])
                    .map(str::trim)
                    .ok_or_else(|| Error::Data(format!("run log row {} is short", line + 1)))
            };
            let num = |j: usize| -> Result<f64> {
                let v: f64 = field(j)?
                    .parse()
                    .map_err(|e| Error::Data(format!("run log row {} column `{}`: {e}", line + 1, CSV_HEADER[j])))?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("run log row {} column `{}` is not finite", line + 1, CSV_HEADER[j])));
                }
                Ok(v)
            };
            let state = |j: usize| -> Result<State> { State::new(Vector3::new(num(j)?, num(j + 1)?, num(j + 2)?), num(j + 3)?) };
            let status = parse_status(field(25)?)
                .ok_or_else(|| Error::Data(format!("run log row {}: unknown status `{}`", line + 1, field(25).unwrap_or(""))))?;
            let sqp_iters = field(24)?
                .parse()
                .map_err(|e| Error::Data(format!("run log row {} column `sqp_iters`: {e}", line + 1)))?;
            let regenerated = match field(26)? {
                "0" | "false" => false,
                "1" | "true" => true,
                other => return Err(Error::Data(format!("run log row {}: bad regenerated flag `{other}`", line + 1))),
            };
            steps.push(StepRecord {
                t: num(0)?,
                state: state(1)?,
                control: ControlInput::new(Vector3::new(num(5)?, num(6)?, num(7)?), num(8)?),
                predicted: state(9)?,
                actual: state(13)?,
                v_hat: Vector3::new(num(17)?, num(18)?, num(19)?),
                reference: Vector3::new(num(20)?, num(21)?, num(22)?),
                solve_time: num(23)?,
                sqp_iters,
                status,
                regenerated,
            });
        }
        let dt = if steps.len() >= 2 { steps[1].t - steps[0].t } else { f64::NAN };
        if steps.len() >= 2 && !(dt > 0.0) {
            return Err(Error::Data("run log time stamps must increase".into()));
        }
        let regenerations = steps.iter().filter(|s| s.regenerated).count();
        Ok(Self {
            dt,
            steps,
            termination: None,
            regenerations,
        })
    }
}

fn predict(model: Option<&ResidualModel>, x: &State, u: &ControlInput, dt: f64) -> State {
    let next = match model {
        Some(m) => rk4_vector(&AugmentedModel::new(m), &x.to_vector(), &u.to_vector(), dt),
        None => rk4_vector(&NominalModel, &x.to_vector(), &u.to_vector(), dt),
    };
    State::from_vector(&next)
}

/// Runs the receding-horizon loop from the reference's first state until the
/// goal is reached, `max_steps` controls have been applied, or regeneration
/// reports the goal unreachable.
pub fn closed_loop_run(
    cfg: &RunConfig,
    world: &WorldModel,
    reference: &ReferenceTrajectory,
    plant: &PlantConfig,
    model: Option<&ResidualModel>,
    max_steps: usize,
) -> Result<RunLog> {
    closed_loop_run_with_diagnostics(cfg, world, reference, plant, model, max_steps, None)
}

pub fn closed_loop_run_with_diagnostics(
    cfg: &RunConfig,
    world: &WorldModel,
    reference: &ReferenceTrajectory,
    plant: &PlantConfig,
    model: Option<&ResidualModel>,
    max_steps: usize,
    diagnostics: Option<Box<dyn Write + Send>>,
) -> Result<RunLog> {
    cfg.validate()?;
    let dt = cfg.nmpc.dt;
    if (reference.dt() - dt).abs() > 1e-12 * dt.max(1.0) {
        return Err(Error::Config(format!(
            "reference dt {} differs from the controller dt {dt}",
            reference.dt()
        )));
    }
    plant.validate(dt)?;

    let mut solver = NmpcSolver::new(cfg.nmpc.clone())?;
    if let Some(sink) = diagnostics {
        solver = solver.with_diagnostics(sink);
    }
    let params = DetourParams {
        d_o: cfg.nmpc.d_o,
        margin: cfg.regeneration.margin,
        v_max: reference.speed().min(cfg.nmpc.v_max),
        dt,
    };
    let mut regen = Regenerator::new(cfg.regeneration, params)?;

    let mut reference = reference.clone();
    let mut idx = 0usize;
    let mut x = reference.start();
    let mut v = Vector3::zeros();
    regen.start(&x.p, &world.goal);
    let mut steps = Vec::with_capacity(max_steps.min(100_000));
    let mut termination = Termination::MaxSteps;

    for k in 0..max_steps {
        if (x.p - world.goal).norm() <= cfg.goal_tolerance {
            termination = Termination::GoalReached;
            break;
        }
        let slice = reference.slice(idx, cfg.nmpc.horizon)?;
        let obstacles = world.visible_obstacles(&x.p);
        let sol = solver.solve(&x, &slice, &obstacles, model)?;
        let u = sol.first_control();
        let predicted = predict(model, &x, &u, dt);
        let (x_next, v_next) = plant_step(plant, &x, &v, &u, dt)?;
        idx += 1;
        let outcome = regen.step(&reference, idx, &x_next, world)?;
        let regenerated = matches!(outcome, RegenOutcome::Regenerated(_));
        steps.push(StepRecord {
            t: dt * k as f64,
            state: x,
            control: u,
            predicted,
            actual: x_next,
            v_hat: v_next,
            reference: slice.states[0].p,
            solve_time: sol.solve_time,
            sqp_iters: sol.sqp_iters,
            status: sol.status,
            regenerated,
        });
        x = x_next;
        v = v_next;
        match outcome {
            RegenOutcome::Unchanged => {}
            RegenOutcome::Regenerated(r) => {
                log::info!("step {k}: reference regenerated at {:?}", x.p);
                reference = r;
                idx = 0;
            }
            RegenOutcome::Unreachable => {
                termination = Termination::Unreachable;
                break;
            }
        }
    }
    if termination == Termination::MaxSteps && (x.p - world.goal).norm() <= cfg.goal_tolerance {
        termination = Termination::GoalReached;
    }
    Ok(RunLog {
        dt,
        steps,
        termination: Some(termination),
        regenerations: regen.count(),
    })
}
