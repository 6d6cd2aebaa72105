mod common;

use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;
use residual_nmpc::dynamics::{f_norm, PlantConfig};
use residual_nmpc::planner::{
    closed_loop_run, generate_reference, random_forest, ForestSpec, RunConfig, Termination, WorldModel,
};

fn waypoints(seed: u64, count: usize) -> Vec<Vector3<f64>> {
    let mut r = rng(seed);
    let mut out = vec![Vector3::new(5.0, 5.0, 2.5)];
    while out.len() < count {
        let step = Vector3::new(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0), r.random_range(-1.0..1.0));
        if step.norm() > 1.0 {
            out.push(out[out.len() - 1] + step);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn references_respect_grid_and_speed(seed in 0u64..10_000, count in 4usize..8, v_max in 0.3f64..2.0) {
        let r = generate_reference(&waypoints(seed, count), v_max, 0.1).unwrap();
        let s = r.samples();
        for (i, smp) in s.iter().enumerate() {
            prop_assert!((smp.t - 0.1 * i as f64).abs() < 1e-9);
            prop_assert!(smp.u.v.amax() <= v_max + 1e-12);
        }
        for i in 0..s.len() - 1 {
            let rate = f_norm(&s[i].x, &s[i].u).unwrap().fixed_rows::<3>(0).into_owned();
            let step = (s[i + 1].x.p - s[i].x.p) / 0.1;
            prop_assert!((step - rate).norm() <= 0.1 * rate.norm().max(1e-3) + 1e-9,
                "interval {}: {:?} vs {:?}", i, step, rate);
        }
    }
}

fn check_log_invariants(cfg: &RunConfig, world: &WorldModel, log: &residual_nmpc::planner::RunLog) {
    for w in log.steps.windows(2) {
        assert!(w[1].t > w[0].t);
        assert!((w[1].t - w[0].t - log.dt).abs() < 1e-9);
    }
    for s in &log.steps {
        assert!(s.control.within_bounds(cfg.nmpc.v_max, cfg.nmpc.omega_max));
    }
    if log.termination == Some(Termination::GoalReached) {
        let last = log.steps.last().unwrap().actual.p;
        assert!((last - world.goal).norm() <= cfg.goal_tolerance);
    }
}

#[test]
fn closed_loop_logs_are_well_formed() {
    let cfg = RunConfig::default();
    for seed in 0..3 {
        let reference = generate_reference(&waypoints(seed, 4), 1.2, 0.1).unwrap();
        let world = WorldModel::empty(reference.end().p);
        for plant in [PlantConfig::model_matched(0.01), PlantConfig::default()] {
            let log = closed_loop_run(&cfg, &world, &reference, &plant, None, 400).unwrap();
            check_log_invariants(&cfg, &world, &log);
        }
    }
}

#[test]
fn tight_tracking_never_regenerates() {
    let cfg = RunConfig::default();
    let reference = generate_reference(&waypoints(8, 5), 1.5, 0.1).unwrap();
    let world = WorldModel::empty(reference.end().p);
    let log = closed_loop_run(&cfg, &world, &reference, &PlantConfig::model_matched(0.01), None, 500).unwrap();
    let worst = log
        .steps
        .iter()
        .map(|s| (s.state.p - s.reference).norm())
        .fold(0.0, f64::max);
    assert!(worst < cfg.regeneration.threshold);
    assert_eq!(log.regenerations, 0);
    assert!(log.steps.iter().all(|s| !s.regenerated));
    assert_eq!(log.termination, Some(Termination::GoalReached));
}

#[test]
fn forest_run_keeps_clear_of_obstacles() {
    let cfg = RunConfig::default();
    let spec = ForestSpec::default();
    let world = random_forest(&spec, 2).unwrap();
    let reference = generate_reference(&line(Vector3::from(spec.start), Vector3::from(spec.goal), 4), 1.5, 0.1).unwrap();
    let log = closed_loop_run(&cfg, &world, &reference, &PlantConfig::model_matched(0.01), None, 600).unwrap();
    check_log_invariants(&cfg, &world, &log);
    let summary = log.summary(&world);
    assert!(summary.success, "{summary:?}");
    assert!(summary.min_clearance.unwrap() >= cfg.nmpc.d_o - 1e-2);
}
