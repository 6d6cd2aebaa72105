//! Pipeline stages shared by the command-line tool and the acceptance suite.

use std::env;
use std::thread;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GeneratorSpec};
use crate::data::{collect, nominal_and_augmented_errors, rmse_report, split_trajectories, ResidualDataset, RmseReport, Scenario};
use crate::dynamics::{PlantConfig, State};
use crate::nmpc::{solve_with_guess, NmpcConfig, ReferenceSlice};
use crate::error::{Error, Result};
use crate::planner::{
    closed_loop_run, generate_reference, random_forest, Bounds, ForestSpec, ReferenceTrajectory, RunConfig, RunLog,
    WorldModel,
};
use crate::residual::{train_residual_model, ResidualModel, ResidualTraining};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "RESIDUAL_NMPC_THREADS";

pub fn worker_threads() -> usize {
    let available = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(available.max(1)),
        _ => available,
    }
}

/// Applies `f` to every item on up to [`worker_threads`] threads, keeping order.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = worker_threads().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn random_waypoints(spec: &GeneratorSpec, bounds: &Bounds, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let lo = Vector3::from_fn(|k, _| bounds.min[k] + spec.inset);
    let hi = Vector3::from_fn(|k, _| bounds.max[k] - spec.inset);
    let sample = |rng: &mut ChaCha8Rng| Vector3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k]));
    let mut out = vec![sample(rng)];
    while out.len() < spec.waypoints {
        let prev = out[out.len() - 1];
        let mut cand = sample(rng);
        for _ in 0..1000 {
            let d = (cand - prev).norm();
            if d >= spec.min_gap && d <= spec.max_gap {
                break;
            }
            cand = sample(rng);
        }
        out.push(cand);
    }
    out
}

/// References named by the configuration: the explicit waypoint list, or
/// `generator.count` seeded random ones.
pub fn reference_set(cfg: &ExperimentConfig) -> Result<Vec<ReferenceTrajectory>> {
    let r = &cfg.reference;
    match (&r.waypoints, &r.generator) {
        (Some(w), _) => {
            let wp: Vec<Vector3<f64>> = w.iter().map(|p| Vector3::from(*p)).collect();
            Ok(vec![generate_reference(&wp, r.v_max, r.dt)?])
        }
        (None, Some(spec)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..spec.count)
                .map(|_| {
                    let wp = random_waypoints(spec, &cfg.world.bounds, &mut rng);
                    let speed = if spec.min_speed < r.v_max {
                        rng.random_range(spec.min_speed..=r.v_max)
                    } else {
                        r.v_max
                    };
                    generate_reference(&wp, speed, r.dt)
                })
                .collect()
        }
        (None, None) => Err(Error::Config("reference needs waypoints or a generator".into())),
    }
}

pub fn free_world(cfg: &ExperimentConfig, reference: &ReferenceTrajectory) -> WorldModel {
    WorldModel {
        obstacles: Vec::new(),
        sensing_radius: cfg.world.sensing_radius,
        goal: reference.end().p,
    }
}

/// Seeded random forest around a reference, clear of its start and goal.
pub fn obstacle_world(cfg: &ExperimentConfig, reference: &ReferenceTrajectory, index: usize) -> Result<WorldModel> {
    let spec = ForestSpec {
        bounds: cfg.world.bounds,
        obstacle_count: cfg.world.obstacle_count,
        start: reference.start().p.into(),
        goal: reference.end().p.into(),
        keep_out: cfg.world.keep_out,
        min_spacing: cfg.world.min_spacing,
        sensing_radius: cfg.world.sensing_radius,
    };
    random_forest(&spec, cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1))
}

pub fn worlds_for(
    cfg: &ExperimentConfig,
    references: &[ReferenceTrajectory],
    indices: &[usize],
    scenario: Scenario,
) -> Result<Vec<WorldModel>> {
    indices
        .iter()
        .map(|&i| match scenario {
            Scenario::WithoutObstacles => Ok(free_world(cfg, &references[i])),
            Scenario::WithObstacles => obstacle_world(cfg, &references[i], i),
        })
        .collect()
}

/// Flies each `(reference, world)` pair in closed loop.
pub fn fly(
    run_cfg: &RunConfig,
    plant: &PlantConfig,
    references: &[&ReferenceTrajectory],
    worlds: &[WorldModel],
    model: Option<&ResidualModel>,
    max_steps: usize,
) -> Result<Vec<RunLog>> {
    if references.len() != worlds.len() {
        return Err(Error::Dimension("one world per reference required".into()));
    }
    let pairs: Vec<(&ReferenceTrajectory, &WorldModel)> = references.iter().copied().zip(worlds).collect();
    parallel_map(&pairs, |_, (r, w)| closed_loop_run(run_cfg, w, r, plant, model, max_steps))
        .into_iter()
        .collect()
}

/// Training data: every reference flown on the plant with the nominal model
/// in an empty world.
#[derive(Debug, Clone)]
pub struct Collection {
    pub logs: Vec<RunLog>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train: ResidualDataset,
    pub test: ResidualDataset,
}

impl Collection {
    pub fn all(&self) -> ResidualDataset {
        let mut d = self.train.clone();
        d.extend(&self.test);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_datasets(
    logs: &[RunLog],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, ResidualDataset, ResidualDataset)> {
    let (train_idx, test_idx) = split_trajectories(logs.len(), train_fraction, seed)?;
    let pick = |idx: &[usize]| -> Vec<RunLog> { idx.iter().map(|&i| logs[i].clone()).collect() };
    let train = collect(&pick(&train_idx))?;
    let test = collect(&pick(&test_idx))?;
    Ok((train_idx, test_idx, train, test))
}

pub fn collect_stage(cfg: &ExperimentConfig, references: &[ReferenceTrajectory]) -> Result<Collection> {
    let run_cfg = cfg.run_config();
    let all: Vec<usize> = (0..references.len()).collect();
    let worlds = worlds_for(cfg, references, &all, Scenario::WithoutObstacles)?;
    let refs: Vec<&ReferenceTrajectory> = references.iter().collect();
    let logs = fly(&run_cfg, &cfg.plant, &refs, &worlds, None, cfg.evaluation.max_steps)?;
    let (train_indices, test_indices, train, test) = split_datasets(&logs, cfg.evaluation.train_fraction, cfg.seed)?;
    Ok(Collection {
        logs,
        train_indices,
        test_indices,
        train,
        test,
    })
}

pub fn train_stage(cfg: &ExperimentConfig, train: &ResidualDataset, m: usize, seed: u64) -> Result<ResidualTraining> {
    train_residual_model(train, &cfg.sgp_options(m, seed), &cfg.sgp.hyp_init, cfg.sgp.max_points)
}

/// Re-flies the held-out references with the augmented model in the loop and
/// scores the residual on the fresh data.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    references: &[ReferenceTrajectory],
    test_indices: &[usize],
    train: &ResidualDataset,
    model: &ResidualModel,
    scenario: Scenario,
) -> Result<(RmseReport, Vec<RunLog>)> {
    let worlds = worlds_for(cfg, references, test_indices, scenario)?;
    let refs: Vec<&ReferenceTrajectory> = test_indices.iter().map(|&i| &references[i]).collect();
    let logs = fly(&cfg.run_config(), &cfg.plant, &refs, &worlds, Some(model), cfg.evaluation.max_steps)?;
    let flown = collect(&logs)?;
    let mut report = nominal_and_augmented_errors(train, &flown, model, scenario)?;
    report.config_hash = Some(cfg.hash());
    Ok((report, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    /// Mean RMSE over seeds.
    pub augmented_rmse: f64,
    /// Standard deviation of the RMSE over seeds.
    pub augmented_rmse_std: f64,
    /// Median time of repeated cold-start solves of one fixed NMPC problem.
    pub median_solve_time: f64,
    /// SQP iterations of that fixed problem.
    pub timing_sqp_iters: usize,
    /// Median solve time over the closed-loop timing run.
    pub closed_loop_median_solve_time: f64,
    pub seeds: usize,
}

/// Median solve time of `solves` cold-start solves of one problem per model.
/// Models are timed round-robin so that drift affects all of them alike.
pub fn time_fixed_problem(
    nmpc: &NmpcConfig,
    x: &State,
    slice: &ReferenceSlice,
    models: &[&ResidualModel],
    solves: usize,
) -> Result<Vec<(f64, usize)>> {
    let mut times = vec![Vec::with_capacity(solves); models.len()];
    let mut iters = vec![0; models.len()];
    for _ in 0..solves {
        for (j, m) in models.iter().enumerate() {
            let sol = solve_with_guess(nmpc, x, slice, &[], None, Some(m), None)?;
            times[j].push(sol.solve_time);
            iters[j] = sol.sqp_iters;
        }
    }
    Ok(times
        .iter_mut()
        .zip(iters)
        .map(|(t, it)| (crate::planner::run::median(t), it))
        .collect())
}

/// For each inducing count: train with every seed and score on `test`, fly
/// the timing reference for `timing_solves` steps, and time `timing_solves`
/// solves of the fixed problem at the reference start.
pub fn sweep_inducing_points(
    cfg: &ExperimentConfig,
    train: &ResidualDataset,
    test: &ResidualDataset,
    timing_reference: &ReferenceTrajectory,
    m_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if m_values.is_empty() || m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("m values must be strictly ascending".into()));
    }
    let run_cfg = cfg.run_config();
    let world = free_world(cfg, timing_reference);
    let seeds: Vec<u64> = (0..cfg.sweep.seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let mut rows = Vec::with_capacity(m_values.len());
    let mut timing_models = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let fits: Vec<Result<(f64, ResidualModel)>> = parallel_map(&seeds, |_, &seed| {
            let fit = train_stage(cfg, train, m, seed)?;
            let rep = rmse_report(test, &fit.model, Scenario::WithoutObstacles)?;
            Ok((rep.augmented_rmse, fit.model))
        });
        let mut fits: Vec<(f64, ResidualModel)> = fits.into_iter().collect::<Result<_>>()?;
        let rmses: Vec<f64> = fits.iter().map(|f| f.0).collect();
        let mean = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let var = rmses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rmses.len().max(2) - 1) as f64;
        let model = fits.swap_remove(0).1;
        let log = closed_loop_run(&run_cfg, &world, timing_reference, &cfg.plant, Some(&model), cfg.sweep.timing_solves)?;
        let mut times: Vec<f64> = log.steps.iter().map(|s| s.solve_time).collect();
        rows.push(SweepRow {
            m,
            augmented_rmse: mean,
            augmented_rmse_std: var.sqrt(),
            median_solve_time: f64::NAN,
            timing_sqp_iters: 0,
            closed_loop_median_solve_time: crate::planner::run::median(&mut times),
            seeds: rmses.len(),
        });
        timing_models.push(model);
    }
    let refs: Vec<&ResidualModel> = timing_models.iter().collect();
    let slice = timing_reference.slice(0, run_cfg.nmpc.horizon)?;
    let timed = time_fixed_problem(&run_cfg.nmpc, &timing_reference.start(), &slice, &refs, cfg.sweep.timing_solves)?;
    for (row, (t, it)) in rows.iter_mut().zip(timed) {
        row.median_solve_time = t;
        row.timing_sqp_iters = it;
        log::info!("sweep m={}: rmse {:.4} median solve {:.3e}s", row.m, row.augmented_rmse, t);
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "m",
        "augmented_rmse",
        "augmented_rmse_std",
        "median_solve_time",
        "timing_sqp_iters",
        "closed_loop_median_solve_time",
        "seeds",
    ])?;
    for r in rows {
        w.write_record([
            r.m.to_string(),
            r.augmented_rmse.to_string(),
            r.augmented_rmse_std.to_string(),
            r.median_solve_time.to_string(),
            r.timing_sqp_iters.to_string(),
            r.closed_loop_median_solve_time.to_string(),
            r.seeds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_references_are_seeded() {
        let cfg = ExperimentConfig::default();
        let a = reference_set(&cfg).unwrap();
        let b = reference_set(&cfg).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        for r in &a {
            assert!(r.speed() <= cfg.reference.v_max + 1e-12);
            assert!(r.samples().iter().all(|s| cfg.world.bounds.contains(&s.x.p)));
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..17).collect();
        let out = parallel_map(&items, |i, &x| (i, x * 2));
        assert!(out.iter().enumerate().all(|(i, &(j, y))| i == j && y == 2 * i));
    }
}
