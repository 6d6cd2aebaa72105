//! Test-side oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use residual_nmpc::dynamics::{rk4_vector, NominalModel, ResidualSelector};
use residual_nmpc::gp::sparse::SgpModel;
use residual_nmpc::gp::{GpDataset, KernelHyperparams};
use residual_nmpc::residual::ResidualModel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of a scalar function.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector function, one column per input.
pub fn fd_jacobian<F: FnMut(&DVector<f64>) -> DVector<f64>>(mut f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let rows = f(x).len();
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut p = x.clone();
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let up = f(&p);
        p[j] = x[j] - h;
        let down = f(&p);
        p[j] = x[j];
        jac.set_column(j, &((up - down) / (2.0 * h)));
    }
    jac
}

/// Max-norm relative error of `a` against reference `b`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

fn se(a: f64, b: f64, hyp: &KernelHyperparams) -> f64 {
    let r = (a - b) / hyp.length_scale();
    hyp.signal_variance() * (-0.5 * r * r).exp()
}

/// Log marginal likelihood from a dense LU determinant and solve.
pub fn brute_force_lml(xs: &[f64], ys: &[f64], hyp: &KernelHyperparams) -> f64 {
    let n = xs.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean));
    let k = DMatrix::from_fn(n, n, |i, j| {
        se(xs[i], xs[j], hyp) + if i == j { hyp.noise_variance() } else { 0.0 }
    });
    let lu = k.clone().lu();
    let alpha = lu.solve(&y).expect("nonsingular");
    -0.5 * y.dot(&alpha) - 0.5 * lu.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Exact predictive mean and latent variance by dense solves.
pub fn brute_force_predict(xs: &[f64], ys: &[f64], hyp: &KernelHyperparams, x: f64) -> (f64, f64) {
    let n = xs.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean));
    let k = DMatrix::from_fn(n, n, |i, j| {
        se(xs[i], xs[j], hyp) + if i == j { hyp.noise_variance() } else { 0.0 }
    });
    let ks = DVector::from_iterator(n, xs.iter().map(|&a| se(a, x, hyp)));
    let lu = k.lu();
    let alpha = lu.solve(&y).unwrap();
    let v = lu.solve(&ks).unwrap();
    (mean + ks.dot(&alpha), hyp.signal_variance() - ks.dot(&v))
}

/// Noisy samples of a smooth 1-D function on `[lo, hi]`.
pub fn random_1d(seed: u64, n: usize, lo: f64, hi: f64, noise: f64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let phase = r.random_range(0.0..6.0);
    let xs: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    let ys = xs
        .iter()
        .map(|&x| (1.7 * x + phase).sin() + 0.3 * x + noise * r.random_range(-1.0..1.0))
        .collect();
    (xs, ys)
}

pub fn dataset(xs: &[f64], ys: &[f64]) -> GpDataset {
    GpDataset::from_scalar(xs, ys).unwrap()
}

pub fn column(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(xs.len(), 1, xs)
}

/// Residual model whose axes are smooth nonlinear functions of the matching
/// world velocity component.
pub fn synthetic_residual(seed: u64) -> ResidualModel {
    let hyp = KernelHyperparams::new(0.8, 0.6, 0.05).unwrap();
    let axes: Vec<SgpModel> = (0..3)
        .map(|k| {
            let (xs, ys) = random_1d(seed + k as u64, 40, -2.0, 2.0, 0.01);
            let d = dataset(&xs, &ys);
            let xm = column(&[-1.5, -0.7, 0.0, 0.6, 1.4]);
            SgpModel::fit(&d, &hyp, &xm, 0.1).unwrap()
        })
        .collect();
    ResidualModel::new(axes.try_into().ok().unwrap(), ResidualSelector::default()).unwrap()
}

pub fn vec3(r: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| r.random_range(-scale..scale))
}

/// Closed-form flow of the kinematic model under a constant command.
pub fn exact_flow(x0: &Vector4<f64>, u: &Vector4<f64>, t: f64) -> Vector4<f64> {
    let (a0, w) = (x0[3], u[3]);
    let a1 = a0 + w * t;
    let (s, c) = if w.abs() < 1e-12 {
        (a0.cos() * t, a0.sin() * t)
    } else {
        ((a1.sin() - a0.sin()) / w, (a0.cos() - a1.cos()) / w)
    };
    // ∫cos, ∫sin over [0, t]
    Vector4::new(
        x0[0] + s * u[0] - c * u[1],
        x0[1] + c * u[0] + s * u[1],
        x0[2] + u[2] * t,
        a1,
    )
}

pub fn rk4_error(dt: f64) -> f64 {
    let x0 = Vector4::new(0.3, -0.2, 1.0, 0.4);
    let u = Vector4::new(1.2, 0.5, -0.3, 1.5);
    let t_end = 2.0;
    let steps = (t_end / dt).round() as usize;
    let mut x = x0;
    for _ in 0..steps {
        x = rk4_vector(&NominalModel, &x, &u, dt);
    }
    (x - exact_flow(&x0, &u, t_end)).amax()
}

/// `count` evenly spaced points from `a` to `b`.
pub fn line(a: Vector3<f64>, b: Vector3<f64>, count: usize) -> Vec<Vector3<f64>> {
    (0..count).map(|i| a + (b - a) * (i as f64 / (count - 1) as f64)).collect()
}
