mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use residual_nmpc::gp::exact::lml_and_gradient;
use residual_nmpc::gp::{optimize_hyperparams, AscentOptions, ExactGp, KernelHyperparams};

#[test]
fn lml_matches_dense_determinant() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let n = r.random_range(1..=20);
        let (xs, ys) = random_1d(seed, n, -3.0, 3.0, 0.2);
        let hyp = KernelHyperparams::new(
            r.random_range(0.3..2.0),
            r.random_range(0.2..2.0),
            r.random_range(0.05..0.8),
        )
        .unwrap();
        let gp = ExactGp::fit(&dataset(&xs, &ys), &hyp).unwrap();
        let brute = brute_force_lml(&xs, &ys, &hyp);
        assert!((gp.log_marginal_likelihood() - brute).abs() < 1e-8, "seed {seed}");
        let x = r.random_range(-3.0..3.0);
        let (m, v) = gp.predict(&[x]);
        let (bm, bv) = brute_force_predict(&xs, &ys, &hyp, x);
        assert!((m - bm).abs() < 1e-9 && (v - bv).abs() < 1e-9);
    }
}

#[test]
fn inflated_noise_lowers_the_evidence() {
    let (xs, ys) = random_1d(3, 60, -3.0, 3.0, 0.05);
    let d = dataset(&xs, &ys);
    let fit = KernelHyperparams::new(1.0, 0.6, 0.05).unwrap();
    let noisy = KernelHyperparams::new(1.0, 0.6, 0.5).unwrap();
    let a = ExactGp::fit(&d, &fit).unwrap().log_marginal_likelihood();
    let b = ExactGp::fit(&d, &noisy).unwrap().log_marginal_likelihood();
    assert!(b < a);
}

#[test]
fn lml_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let (xs, ys) = random_1d(seed, 30, -3.0, 3.0, 0.1);
        let d = dataset(&xs, &ys);
        let log = [
            r.random_range(-0.5..0.5),
            r.random_range(-1.0..0.5),
            r.random_range(-2.5..-0.5),
        ];
        let (_, g) = lml_and_gradient(&d, &KernelHyperparams::from_log(log).unwrap()).unwrap();
        let fd = fd_gradient(
            |p| {
                let h = KernelHyperparams::from_log([p[0], p[1], p[2]]).unwrap();
                ExactGp::fit(&d, &h).unwrap().log_marginal_likelihood()
            },
            &log,
            1e-5,
        );
        assert!(rel_err(&g, &fd) <= 1e-4, "seed {seed}: {g:?} vs {fd:?}");
    }
}

fn sample_prior(seed: u64, n: usize, hyp: &KernelHyperparams) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let xs: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    let k = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let d = (xs[i] - xs[j]) / hyp.length_scale();
        hyp.signal_variance() * (-0.5 * d * d).exp() + if i == j { 1e-8 } else { 0.0 }
    });
    let l = k.cholesky().unwrap().unpack();
    let z = nalgebra::DVector::from_fn(n, |_, _| {
        let normal: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
        normal
    });
    let f = l * z;
    let ys = (0..n)
        .map(|i| {
            let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
            f[i] + hyp.sigma_n() * e
        })
        .collect();
    (xs, ys)
}

#[test]
fn hyperparameters_are_recovered() {
    let truth = KernelHyperparams::new(1.0, 0.5, 0.1).unwrap();
    let (xs, ys) = sample_prior(7, 200, &truth);
    let init = KernelHyperparams::new(0.7, 1.0, 0.3).unwrap();
    let (hyp, _) = optimize_hyperparams(&dataset(&xs, &ys), &init, &AscentOptions::default()).unwrap();
    let l = hyp.length_scale();
    assert!((l - 0.5).abs() <= 0.15, "recovered length scale {l}");
}

#[test]
fn optimum_is_a_fixed_point() {
    let (xs, ys) = random_1d(11, 50, -3.0, 3.0, 0.1);
    let d = dataset(&xs, &ys);
    let init = KernelHyperparams::new(1.0, 1.0, 0.2).unwrap();
    let (best, _) = optimize_hyperparams(&d, &init, &AscentOptions::default()).unwrap();
    let (again, trace) = optimize_hyperparams(&d, &best, &AscentOptions::default()).unwrap();
    assert!(trace.iterations <= 1, "{} iterations", trace.iterations);
    assert!((again.length_scale() - best.length_scale()).abs() < 1e-6);
}

#[test]
fn posterior_interpolates_with_tiny_noise() {
    let (xs, ys) = random_1d(5, 15, -3.0, 3.0, 0.0);
    let hyp = KernelHyperparams::new(1.0, 0.5, 1e-6).unwrap();
    let gp = ExactGp::fit(&dataset(&xs, &ys), &hyp).unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        assert!((gp.predict(&[*x]).0 - y).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mean_is_linear_in_targets(seed in 0u64..1000, n in 2usize..25, x in -3.0f64..3.0, c in 0.2f64..4.0) {
        let (xs, ys) = random_1d(seed, n, -3.0, 3.0, 0.2);
        let hyp = KernelHyperparams::new(1.0, 0.7, 0.1).unwrap();
        let scaled: Vec<f64> = ys.iter().map(|y| c * y).collect();
        let a = ExactGp::fit(&dataset(&xs, &ys), &hyp).unwrap().predict(&[x]);
        let b = ExactGp::fit(&dataset(&xs, &scaled), &hyp).unwrap().predict(&[x]);
        prop_assert!((b.0 - c * a.0).abs() <= 1e-9 * (1.0 + b.0.abs()));
        prop_assert!((b.1 - a.1).abs() <= 1e-12);
    }

    #[test]
    fn gram_is_symmetric_positive_definite(seed in 0u64..1000, n in 1usize..30, sn in 0.01f64..1.0) {
        let (xs, _) = random_1d(seed, n, -3.0, 3.0, 0.0);
        let hyp = KernelHyperparams::new(1.3, 0.4, sn).unwrap();
        let k = residual_nmpc::gp::kernel::cross_covariance(&column(&xs), &column(&xs), &hyp);
        prop_assert!((&k - k.transpose()).amax() == 0.0);
        let noisy = k + nalgebra::DMatrix::identity(n, n) * hyp.noise_variance();
        let eig = noisy.symmetric_eigenvalues();
        prop_assert!(eig.min() > 0.0);
    }
}
