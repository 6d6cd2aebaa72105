mod common;

use common::rk4_error;
use nalgebra::Vector3;
use proptest::prelude::*;
use residual_nmpc::dynamics::{
    f_norm, normalize_angle, plant_step, rk4_step, AugmentedModel, ControlInput, NominalModel,
    PlantConfig, State,
};
use residual_nmpc::residual::ResidualModel;

#[test]
fn rk4_is_fourth_order() {
    let dts = [0.2, 0.1, 0.05, 0.025];
    let errs: Vec<f64> = dts.iter().map(|&dt| rk4_error(dt)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
    }
}

#[test]
fn zero_residual_is_bit_identical_to_nominal() {
    let zero = ResidualModel::zero();
    let model = AugmentedModel::new(&zero);
    let x = State::at(1.0, -2.0, 0.5, 2.9);
    let u = ControlInput::new(Vector3::new(0.7, -1.1, 0.2), -0.8);
    let a = rk4_step(&NominalModel, &x, &u, 0.1).unwrap();
    let b = rk4_step(&model, &x, &u, 0.1).unwrap();
    assert_eq!(a.p.map(f64::to_bits), b.p.map(f64::to_bits));
    assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
}

#[test]
fn trained_residual_changes_only_position_rows() {
    let res = common::synthetic_residual(4);
    let x = State::at(0.0, 0.0, 1.0, 0.7);
    let u = ControlInput::new(Vector3::new(0.8, 0.3, -0.2), 0.5);
    let nominal = f_norm(&x, &u).unwrap();
    let augmented = residual_nmpc::dynamics::f_est(&x, &u, &res).unwrap();
    assert_eq!(nominal[3], augmented[3]);
    assert!((nominal - augmented).fixed_rows::<3>(0).norm() > 0.0);
}

proptest! {
    #[test]
    fn f_norm_is_linear_in_velocity(
        alpha in -3.1f64..3.1,
        vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0,
        a in -3.0f64..3.0,
    ) {
        let x = State::at(0.0, 0.0, 0.0, alpha);
        let v = Vector3::new(vx, vy, vz);
        let f1 = f_norm(&x, &ControlInput::new(v, 0.0)).unwrap();
        let fa = f_norm(&x, &ControlInput::new(v * a, 0.0)).unwrap();
        for k in 0..3 {
            prop_assert!((fa[k] - a * f1[k]).abs() <= 1e-12 * (1.0 + fa[k].abs()));
        }
    }

    #[test]
    fn yaw_stays_normalized(alpha in -10.0f64..10.0, w in -3.0f64..3.0) {
        let x = State::at(0.0, 0.0, 0.0, normalize_angle(alpha));
        let next = rk4_step(&NominalModel, &x, &ControlInput::new(Vector3::zeros(), w), 0.1).unwrap();
        prop_assert!(next.alpha > -std::f64::consts::PI && next.alpha <= std::f64::consts::PI);
    }

    #[test]
    fn plant_is_deterministic(
        vx in -2.0f64..2.0, vy in -2.0f64..2.0, w in -1.0f64..1.0, tau in 0.02f64..0.5, cd in 0.0f64..2.0,
    ) {
        let plant = PlantConfig { tau, c_d: cd, dt_sim: 0.01 };
        let u = ControlInput::new(Vector3::new(vx, vy, 0.1), w);
        let run = || {
            let mut x = State::at(0.0, 0.0, 1.0, 0.2);
            let mut v = Vector3::zeros();
            for _ in 0..20 {
                let (nx, nv) = plant_step(&plant, &x, &v, &u, 0.1).unwrap();
                x = nx;
                v = nv;
            }
            (x, v)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.p.map(f64::to_bits), b.0.p.map(f64::to_bits));
        prop_assert_eq!(a.1.map(f64::to_bits), b.1.map(f64::to_bits));
    }
}
