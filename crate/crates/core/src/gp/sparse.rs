//! Variational sparse GP with the collapsed evidence lower bound.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::exact::{duplicate_rows, matrix_from_rows, rows_of, ExactGp, GpDataset};
use super::inducing::{distinct_inputs, select_inducing_points};
use super::kernel::{covariance_vector, cross_covariance, sq_dist_matrix, KernelHyperparams};
use super::optim::{maximize, AscentOptions, AscentResult};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, solve_lower, symmetrize};

/// Factorizations shared by the bound, its gradient and the variational
/// parameters.
struct Factors {
    kmm: DMatrix<f64>,
    lm: DMatrix<f64>,
    kmn: DMatrix<f64>,
    /// `Lm⁻¹ Kmn / σ_n`
    a: DMatrix<f64>,
    aat: DMatrix<f64>,
    lb: DMatrix<f64>,
    /// `A y`
    ay: DVector<f64>,
    /// `LB⁻¹ A y / σ_n`
    c: DVector<f64>,
}

fn check_inducing(x_m: &DMatrix<f64>, data: &GpDataset) -> Result<()> {
    if x_m.nrows() == 0 {
        return Err(Error::Domain("at least one inducing point is required".into()));
    }
    if x_m.ncols() != data.input_dim() {
        return Err(Error::Dimension(format!(
            "inducing inputs have dimension {}, data has {}",
            x_m.ncols(),
            data.input_dim()
        )));
    }
    if let Some((i, j)) = duplicate_rows(x_m) {
        return Err(Error::SingularKernel(format!(
            "inducing points {i} and {j} coincide"
        )));
    }
    Ok(())
}

/// Relative jitter always added to `K_mm`; doubled on factorization failure.
const KMM_JITTER: f64 = 1e-12;

/// Jittered `K_mm` and its lower factor.
fn factor_kmm(x_m: &DMatrix<f64>, hyp: &KernelHyperparams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sf2 = hyp.signal_variance();
    let mut kmm = cross_covariance(x_m, x_m, hyp);
    let (ch, jitter) = cholesky_jittered(&kmm, KMM_JITTER * sf2, sf2)?;
    for i in 0..kmm.nrows() {
        kmm[(i, i)] += jitter;
    }
    Ok((kmm, ch.unpack()))
}

fn factors(data: &GpDataset, hyp: &KernelHyperparams, x_m: &DMatrix<f64>) -> Result<Factors> {
    check_inducing(x_m, data)?;
    let sn = hyp.sigma_n();
    if !(sn > 0.0) {
        return Err(Error::Domain("sparse GP requires sigma_n > 0".into()));
    }
    let m = x_m.nrows();
    let (kmm, lm) = factor_kmm(x_m, hyp)?;
    let kmn = cross_covariance(x_m, data.inputs(), hyp);
    let a = solve_lower(&lm, &kmn) / sn;
    let aat = &a * a.transpose();
    let b = DMatrix::identity(m, m) + &aat;
    let lb = Cholesky::new(b)
        .ok_or_else(|| Error::SingularKernel("I + A Aᵀ is not positive definite".into()))?
        .unpack();
    let ay = &a * data.targets();
    let c = lb.solve_lower_triangular(&ay).expect("positive factor") / sn;
    Ok(Factors {
        kmm,
        lm,
        kmn,
        a,
        aat,
        lb,
        ay,
        c,
    })
}

fn bound_value(data: &GpDataset, hyp: &KernelHyperparams, f: &Factors) -> f64 {
    let n = data.len() as f64;
    let s = hyp.noise_variance();
    let y = data.targets();
    -0.5 * n * (2.0 * PI).ln()
        - f.lb.diagonal().iter().map(|d| d.ln()).sum::<f64>()
        - 0.5 * n * s.ln()
        - 0.5 * y.dot(y) / s
        + 0.5 * f.c.dot(&f.c)
        - 0.5 * n * hyp.signal_variance() / s
        + 0.5 * f.aat.trace()
}

/// Collapsed evidence lower bound
/// `log N(y | 0, σ_n²I + Q_nn) − Tr(K_nn − Q_nn) / 2σ_n²` on centered targets.
pub fn elbo(data: &GpDataset, hyp: &KernelHyperparams, x_m: &DMatrix<f64>) -> Result<f64> {
    let f = factors(data, hyp, x_m)?;
    Ok(bound_value(data, hyp, &f))
}

/// Gradient of the bound w.r.t. the log-hyperparameters and the inducing inputs.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    /// `[∂/∂ln σ_f, ∂/∂ln l, ∂/∂ln σ_n]`
    pub hyp: [f64; 3],
    /// Same shape as the inducing-input matrix.
    pub inducing: DMatrix<f64>,
}

/// Bound and its analytic gradient.
pub fn elbo_with_gradient(
    data: &GpDataset,
    hyp: &KernelHyperparams,
    x_m: &DMatrix<f64>,
) -> Result<(f64, ElboGradient)> {
    let f = factors(data, hyp, x_m)?;
    let value = bound_value(data, hyp, &f);

    let x = data.inputs();
    let y = data.targets();
    let m = x_m.nrows();
    let n = data.len();
    let d = x_m.ncols();
    let s = hyp.noise_variance();
    let sn = hyp.sigma_n();
    let sf2 = hyp.signal_variance();
    let l2 = hyp.length_scale().powi(2);

    let eye = DMatrix::<f64>::identity(m, m);
    let linv = solve_lower(&f.lm, &eye);
    let binv = {
        let lbinv = solve_lower(&f.lb, &eye);
        lbinv.transpose() * lbinv
    };
    let binv_ay = &binv * &f.ay;
    let alpha = linv.transpose() * &binv_ay * sn;
    let ua = f.kmn.transpose() * &alpha;

    let mid = (&eye - &binv - &f.aat) * 0.5;
    let g_k = linv.transpose() * mid * &linv - (&alpha * alpha.transpose()) * (0.5 / (s * s));
    let g_u = (&alpha * y.transpose()) / (s * s) - (&alpha * ua.transpose()) / (s * s * s)
        + linv.transpose() * ((&eye - &binv) * &f.a) / sn;

    let t = n as f64 * sf2;
    let dl_ds = 0.5 * y.dot(y) / (s * s) - y.dot(&ua) / (s * s * s)
        + 0.5 * ua.dot(&ua) / (s * s * s * s)
        + 0.5 * (&binv * &f.aat).trace() / s
        - 0.5 * n as f64 / s
        + 0.5 * t / (s * s)
        - 0.5 * f.aat.trace() / s;
    let dl_dt = -0.5 / s;

    let d2_mm = sq_dist_matrix(x_m, x_m);
    let d2_mn = sq_dist_matrix(x_m, x);
    let kse_mm = cross_covariance(x_m, x_m, hyp);

    let mut g_sf = 2.0 * t * dl_dt;
    let mut g_l = 0.0;
    for j in 0..m {
        for k in 0..m {
            g_sf += g_k[(j, k)] * 2.0 * f.kmm[(j, k)];
            g_l += g_k[(j, k)] * kse_mm[(j, k)] * d2_mm[(j, k)] / l2;
        }
    }
    for i in 0..n {
        for j in 0..m {
            let u = f.kmn[(j, i)];
            g_sf += g_u[(j, i)] * 2.0 * u;
            g_l += g_u[(j, i)] * u * d2_mn[(j, i)] / l2;
        }
    }
    let g_sn = 2.0 * s * dl_ds;

    let w_k = g_k.component_mul(&kse_mm);
    let w_u = g_u.component_mul(&f.kmn);
    let mut g_x = DMatrix::zeros(m, d);
    for j in 0..m {
        for c in 0..d {
            let mut acc = 0.0;
            for k in 0..m {
                acc -= 2.0 * w_k[(j, k)] * (x_m[(j, c)] - x_m[(k, c)]);
            }
            for i in 0..n {
                acc -= w_u[(j, i)] * (x_m[(j, c)] - x[(i, c)]);
            }
            g_x[(j, c)] = acc / l2;
        }
    }

    Ok((
        value,
        ElboGradient {
            hyp: [g_sf, g_l, g_sn],
            inducing: g_x,
        },
    ))
}

/// Variational parameters plus the prediction caches derived from the same
/// factors.
struct Posterior {
    mu: DVector<f64>,
    a_cov: DMatrix<f64>,
    lm: DMatrix<f64>,
    weights: DVector<f64>,
    inner: DMatrix<f64>,
}

fn posterior(data: &GpDataset, hyp: &KernelHyperparams, x_m: &DMatrix<f64>) -> Result<Posterior> {
    let f = factors(data, hyp, x_m)?;
    let m = x_m.nrows();
    let lbinv = solve_lower(&f.lb, &DMatrix::identity(m, m));
    let mut binv = lbinv.transpose() * lbinv;
    symmetrize(&mut binv);
    let t = &binv * &f.ay / hyp.sigma_n();
    let mu = &f.lm * &t;
    let mut a_cov = &f.lm * &binv * f.lm.transpose();
    symmetrize(&mut a_cov);
    let weights = f.lm.tr_solve_lower_triangular(&t).expect("positive factor");
    Ok(Posterior {
        mu,
        a_cov,
        lm: f.lm,
        weights,
        inner: binv,
    })
}

/// Closed-form optimal variational mean `μ` and covariance `A` of the
/// inducing outputs.
pub fn compute_variational_params(
    data: &GpDataset,
    hyp: &KernelHyperparams,
    x_m: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = posterior(data, hyp, x_m)?;
    Ok((p.mu, p.a_cov))
}

fn check_parts(x_m: &DMatrix<f64>, mu: &DVector<f64>, a_cov: &DMatrix<f64>, data_mean: f64, delta_v: f64) -> Result<()> {
    let m = x_m.nrows();
    if m == 0 || mu.len() != m || a_cov.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "sparse GP with {m} inducing points got mu of length {} and A of shape {:?}",
            mu.len(),
            a_cov.shape()
        )));
    }
    if !(delta_v > 0.0 && delta_v.is_finite()) {
        return Err(Error::Domain(format!("delta_v must be positive, got {delta_v}")));
    }
    if x_m.iter().chain(mu.iter()).chain(a_cov.iter()).any(|v| !v.is_finite()) || !data_mean.is_finite() {
        return Err(Error::Data("non-finite sparse GP parameters".into()));
    }
    if let Some((i, j)) = duplicate_rows(x_m) {
        return Err(Error::SingularKernel(format!("inducing points {i} and {j} coincide")));
    }
    Ok(())
}

/// A finalized sparse GP ready for prediction.
#[derive(Debug)]
pub struct SgpModel {
    hyp: KernelHyperparams,
    x_m: DMatrix<f64>,
    mu: DVector<f64>,
    a_cov: DMatrix<f64>,
    data_mean: f64,
    delta_v: f64,
    lm: DMatrix<f64>,
    /// `K_mm⁻¹ μ`
    weights: DVector<f64>,
    /// `Lm⁻¹ A Lm⁻ᵀ`
    inner: DMatrix<f64>,
    clamped: AtomicUsize,
}

impl Clone for SgpModel {
    fn clone(&self) -> Self {
        Self {
            hyp: self.hyp,
            x_m: self.x_m.clone(),
            mu: self.mu.clone(),
            a_cov: self.a_cov.clone(),
            data_mean: self.data_mean,
            delta_v: self.delta_v,
            lm: self.lm.clone(),
            weights: self.weights.clone(),
            inner: self.inner.clone(),
            clamped: AtomicUsize::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

/// Serialized form of an [`SgpModel`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgpRecord {
    pub hyperparams: KernelHyperparams,
    pub inducing_inputs: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub a_cov: Vec<Vec<f64>>,
    pub data_mean: f64,
    pub m: usize,
    pub delta_v: f64,
}

impl SgpModel {
    /// Assembles a model from its variational parameters.
    pub fn from_parts(
        hyp: KernelHyperparams,
        x_m: DMatrix<f64>,
        mu: DVector<f64>,
        a_cov: DMatrix<f64>,
        data_mean: f64,
        delta_v: f64,
    ) -> Result<Self> {
        check_parts(&x_m, &mu, &a_cov, data_mean, delta_v)?;
        let (_, lm) = factor_kmm(&x_m, &hyp)?;
        let t = lm.solve_lower_triangular(&mu).expect("positive factor");
        let weights = lm.tr_solve_lower_triangular(&t).expect("positive factor");
        let la = solve_lower(&lm, &a_cov);
        let mut inner = solve_lower(&lm, &la.transpose());
        symmetrize(&mut inner);
        Ok(Self {
            hyp,
            x_m,
            mu,
            a_cov,
            data_mean,
            delta_v,
            lm,
            weights,
            inner,
            clamped: AtomicUsize::new(0),
        })
    }

    /// Computes the optimal `μ`, `A` for fixed inducing inputs.
    pub fn fit(data: &GpDataset, hyp: &KernelHyperparams, x_m: &DMatrix<f64>, delta_v: f64) -> Result<Self> {
        let p = posterior(data, hyp, x_m)?;
        check_parts(x_m, &p.mu, &p.a_cov, data.mean(), delta_v)?;
        Ok(Self {
            hyp: *hyp,
            x_m: x_m.clone(),
            mu: p.mu,
            a_cov: p.a_cov,
            data_mean: data.mean(),
            delta_v,
            lm: p.lm,
            weights: p.weights,
            inner: p.inner,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyp
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.x_m
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn a_cov(&self) -> &DMatrix<f64> {
        &self.a_cov
    }

    pub fn data_mean(&self) -> f64 {
        self.data_mean
    }

    pub fn m(&self) -> usize {
        self.x_m.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x_m.ncols()
    }

    pub fn delta_v(&self) -> f64 {
        self.delta_v
    }

    /// Number of predictions whose variance was clamped at zero.
    pub fn clamped_variances(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    fn kvec(&self, x: &[f64]) -> DVector<f64> {
        covariance_vector(x, &self.x_m, &self.hyp)
    }

    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.kvec(x).dot(&self.weights) + self.data_mean
    }

    /// Mean and its gradient with respect to the input.
    pub fn predict_mean_with_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = self.kvec(x);
        let l2 = self.hyp.length_scale().powi(2);
        let mut grad = vec![0.0; x.len()];
        for j in 0..self.m() {
            let wk = self.weights[j] * k[j] / l2;
            for (c, g) in grad.iter_mut().enumerate() {
                *g -= wk * (x[c] - self.x_m[(j, c)]);
            }
        }
        (k.dot(&self.weights) + self.data_mean, grad)
    }

    /// Latent predictive variance.
    pub fn predict_variance(&self, x: &[f64]) -> f64 {
        let k = self.kvec(x);
        self.variance_from(&k)
    }

    fn variance_from(&self, k: &DVector<f64>) -> f64 {
        let v = self.lm.solve_lower_triangular(k).expect("positive factor");
        let var = self.hyp.signal_variance() - v.norm_squared() + v.dot(&(&self.inner * &v));
        if var < 0.0 {
            if var < -1e-10 {
                warn!("sparse GP variance {var:.3e} clamped to zero");
            }
            self.clamped.fetch_add(1, Ordering::Relaxed);
            0.0
        } else {
            var
        }
    }

    /// Predictive mean (data mean restored) and latent variance.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = self.kvec(x);
        (k.dot(&self.weights) + self.data_mean, self.variance_from(&k))
    }

    pub fn to_record(&self) -> SgpRecord {
        SgpRecord {
            hyperparams: self.hyp,
            inducing_inputs: rows_of(&self.x_m),
            mu: self.mu.iter().copied().collect(),
            a_cov: rows_of(&self.a_cov),
            data_mean: self.data_mean,
            m: self.m(),
            delta_v: self.delta_v,
        }
    }

    pub fn from_record(rec: &SgpRecord) -> Result<Self> {
        let x_m = matrix_from_rows(&rec.inducing_inputs)?;
        if rec.m != x_m.nrows() {
            return Err(Error::Dimension(format!(
                "record declares m={} but holds {} inducing inputs",
                rec.m,
                x_m.nrows()
            )));
        }
        let a_cov = matrix_from_rows(&rec.a_cov)?;
        Self::from_parts(
            rec.hyperparams,
            x_m,
            DVector::from_column_slice(&rec.mu),
            a_cov,
            rec.data_mean,
            rec.delta_v,
        )
    }
}

/// Bound at the end of training, with the exact evidence when affordable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub exact_lml: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SgpTrainOptions {
    pub m: usize,
    /// Low-velocity bias for the inducing-point initialization (0 disables it).
    pub bias: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Largest dataset for which the exact evidence is also computed.
    pub exact_lml_max_n: usize,
    pub delta_v: f64,
}

impl Default for SgpTrainOptions {
    fn default() -> Self {
        Self {
            m: 30,
            bias: 0.5,
            seed: 0,
            max_iters: 1000,
            grad_tol: 1e-5,
            exact_lml_max_n: 2000,
            delta_v: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgpTraining {
    pub model: SgpModel,
    pub report: ElboReport,
    pub trace: AscentResult,
}

/// Clamps inducing inputs to within `pad` of the data range and drops
/// coincident points, which add nothing to the posterior.
fn settle_inducing(mut xm: DMatrix<f64>, data: &GpDataset, pad: f64) -> Result<DMatrix<f64>> {
    for c in 0..xm.ncols() {
        let col = data.inputs().column(c);
        let (lo, hi) = (col.min() - pad, col.max() + pad);
        for v in xm.column_mut(c).iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    if duplicate_rows(&xm).is_none() {
        return Ok(xm);
    }
    let kept = distinct_inputs(&xm);
    warn!("{} of {} inducing points coincided after training", xm.nrows() - kept.len(), xm.nrows());
    matrix_from_rows(&kept)
}

/// Jointly maximizes the bound over the inducing inputs and the
/// log-hyperparameters, then fixes `μ` and `A`.
pub fn train_sgp(data: &GpDataset, opts: &SgpTrainOptions, hyp_init: &KernelHyperparams) -> Result<SgpTraining> {
    let n = data.len();
    if opts.m == 0 || opts.m > n {
        return Err(Error::Domain(format!(
            "inducing count must satisfy 1 <= m <= n, got m={} n={n}",
            opts.m
        )));
    }
    if hyp_init.to_log().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("initial hyperparameters must be positive: {hyp_init:?}")));
    }
    let d = data.input_dim();
    let x0 = select_inducing_points(data, opts.m, opts.bias, opts.seed)?;
    let freeze = opts.m == distinct_inputs(data.inputs()).len();

    let mut start = hyp_init.to_log().to_vec();
    if !freeze {
        for i in 0..opts.m {
            for c in 0..d {
                start.push(x0[(i, c)]);
            }
        }
    }
    let unpack = |p: &DVector<f64>| -> Result<(KernelHyperparams, DMatrix<f64>)> {
        let hyp = KernelHyperparams::from_log([p[0], p[1], p[2]])?;
        let xm = if freeze {
            x0.clone()
        } else {
            DMatrix::from_fn(opts.m, d, |i, c| p[3 + i * d + c])
        };
        Ok((hyp, xm))
    };
    let objective = |p: &DVector<f64>| {
        let (hyp, xm) = unpack(p)?;
        let (v, g) = elbo_with_gradient(data, &hyp, &xm)?;
        let mut grad = g.hyp.to_vec();
        if !freeze {
            for i in 0..opts.m {
                for c in 0..d {
                    grad.push(g.inducing[(i, c)]);
                }
            }
        }
        Ok((v, DVector::from_vec(grad)))
    };
    let ascent = AscentOptions {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        max_step: 1.0,
    };
    let trace = maximize(objective, DVector::from_vec(start), &ascent)?;
    debug!(
        "sparse GP training: {} iterations, bound {:.6}, gradient norm {:.3e}",
        trace.iterations, trace.value, trace.grad_norm
    );

    let (hyp, xm) = unpack(&trace.params)?;
    let xm = settle_inducing(xm, data, 2.0 * hyp.length_scale())?;
    let model = SgpModel::fit(data, &hyp, &xm, opts.delta_v)?;
    let bound = elbo(data, &hyp, &xm)?;
    let exact_lml = if n <= opts.exact_lml_max_n {
        Some(ExactGp::fit(data, &hyp)?.log_marginal_likelihood())
    } else {
        None
    };
    let report = ElboReport {
        elbo: bound,
        exact_lml,
        gap: exact_lml.map(|e| e - bound),
    };
    Ok(SgpTraining { model, report, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hyp(sf: f64, l: f64, sn: f64) -> KernelHyperparams {
        KernelHyperparams::new(sf, l, sn).unwrap()
    }

    fn toy(n: usize) -> GpDataset {
        let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (1.7 * x).sin() + 0.3 * x).collect();
        GpDataset::from_scalar(&xs, &ys).unwrap()
    }

    #[test]
    fn full_inducing_set_matches_exact_evidence() {
        let data = toy(25);
        let h = hyp(1.1, 0.7, 0.1);
        let bound = elbo(&data, &h, data.inputs()).unwrap();
        let exact = ExactGp::fit(&data, &h).unwrap().log_marginal_likelihood();
        assert_abs_diff_eq!(bound, exact, epsilon = 1e-6);
    }

    #[test]
    fn distant_single_inducing_point() {
        let data = toy(20);
        let h = hyp(1.0, 0.5, 0.2);
        let far = DMatrix::from_element(1, 1, 100.0);
        let n = data.len() as f64;
        let s = h.noise_variance();
        let y = data.targets();
        let expected = -0.5 * n * (2.0 * PI * s).ln() - 0.5 * y.dot(y) / s - 0.5 * n / s;
        let bound = elbo(&data, &h, &far).unwrap();
        assert_abs_diff_eq!(bound, expected, epsilon = 1e-9);
        assert!(bound < elbo(&data, &h, data.inputs()).unwrap());
    }

    #[test]
    fn duplicate_inducing_points_are_named() {
        let data = toy(10);
        let xm = DMatrix::from_column_slice(3, 1, &[0.1, 0.5, 0.1]);
        match elbo(&data, &hyp(1.0, 1.0, 0.1), &xm) {
            Err(Error::SingularKernel(msg)) => assert!(msg.contains('0') && msg.contains('2')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let xs = [-1.0, 0.0, 0.5, 1.5];
        let data = GpDataset::from_scalar(&xs, &[0.0; 4]).unwrap();
        let xm = DMatrix::from_column_slice(2, 1, &[-0.5, 1.0]);
        let (mu, a) = compute_variational_params(&data, &hyp(1.0, 1.0, 0.3), &xm).unwrap();
        assert!(mu.iter().all(|v| *v == 0.0));
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_inducing_predictions_match_exact() {
        let data = toy(50);
        let h = hyp(0.9, 0.6, 0.05);
        let sgp = SgpModel::fit(&data, &h, data.inputs(), 0.1).unwrap();
        let gp = ExactGp::fit(&data, &h).unwrap();
        for i in 0..80 {
            let x = -3.0 + 6.0 * i as f64 / 79.0;
            let (ms, vs) = sgp.predict(&[x]);
            let (me, ve) = gp.predict(&[x]);
            assert_abs_diff_eq!(ms, me, epsilon = 1e-6);
            assert_abs_diff_eq!(vs, ve, epsilon = 1e-6);
        }
    }

    #[test]
    fn prior_reversion_far_away() {
        let data = toy(30);
        let xm = DMatrix::from_column_slice(4, 1, &[-1.5, -0.5, 0.5, 1.5]);
        let h = hyp(0.8, 0.5, 0.1);
        let sgp = SgpModel::fit(&data, &h, &xm, 0.1).unwrap();
        let (m, v) = sgp.predict(&[50.0]);
        assert_abs_diff_eq!(m, data.mean(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, h.signal_variance(), epsilon = 1e-12);
        assert!(sgp.predict_variance(&[0.5]) < sgp.predict_variance(&[0.5 + 5.0 * 0.5]));
    }

    #[test]
    fn record_round_trip() {
        let data = toy(30);
        let xm = DMatrix::from_column_slice(5, 1, &[-1.8, -0.9, 0.0, 0.9, 1.8]);
        let sgp = SgpModel::fit(&data, &hyp(1.0, 0.6, 0.1), &xm, 0.1).unwrap();
        let json = serde_json::to_string(&sgp.to_record()).unwrap();
        let back = SgpModel::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_record(), sgp.to_record());
        for x in [-2.5, -0.3, 0.4, 3.0] {
            let (a, b) = (sgp.predict(&[x]), back.predict(&[x]));
            assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-12);
            assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let data = toy(30);
        let xm = DMatrix::from_column_slice(5, 1, &[-1.8, -0.9, 0.0, 0.9, 1.8]);
        let sgp = SgpModel::fit(&data, &hyp(1.0, 0.6, 0.1), &xm, 0.1).unwrap();
        for x in [-1.3, 0.2, 2.2] {
            let (_, g) = sgp.predict_mean_with_gradient(&[x]);
            let h = 1e-6;
            let fd = (sgp.predict_mean(&[x + h]) - sgp.predict_mean(&[x - h])) / (2.0 * h);
            assert_abs_diff_eq!(g[0], fd, epsilon = 1e-7);
        }
    }

    fn noisy(n: usize) -> GpDataset {
        let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (1.7 * x).sin() + 0.2 * ((i * 7919 % 13) as f64 / 6.0 - 1.0))
            .collect();
        GpDataset::from_scalar(&xs, &ys).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = noisy(40);
        let h = hyp(0.9, 0.7, 0.15);
        let xm = DMatrix::from_column_slice(6, 1, &[-1.7, -1.1, -0.2, 0.4, 1.0, 1.9]);
        let (_, g) = elbo_with_gradient(&data, &h, &xm).unwrap();
        let eps = 1e-5;
        for k in 0..3 {
            let mut lp = h.to_log();
            let mut lm = h.to_log();
            lp[k] += eps;
            lm[k] -= eps;
            let fp = elbo(&data, &KernelHyperparams::from_log(lp).unwrap(), &xm).unwrap();
            let fm = elbo(&data, &KernelHyperparams::from_log(lm).unwrap(), &xm).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((g.hyp[k] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "hyp {k}: {} vs {fd}", g.hyp[k]);
        }
        for j in 0..xm.nrows() {
            let mut xp = xm.clone();
            let mut xn = xm.clone();
            xp[(j, 0)] += eps;
            xn[(j, 0)] -= eps;
            let fd = (elbo(&data, &h, &xp).unwrap() - elbo(&data, &h, &xn).unwrap()) / (2.0 * eps);
            let a = g.inducing[(j, 0)];
            assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1.0), "x_m {j}: {a} vs {fd}");
        }
    }

    #[test]
    fn saturated_training_is_tight() {
        let data = noisy(12);
        let opts = SgpTrainOptions {
            m: 12,
            ..Default::default()
        };
        let out = train_sgp(&data, &opts, &hyp(1.0, 1.0, 0.1)).unwrap();
        let gap = out.report.gap.unwrap();
        assert!(gap.abs() < 1e-6, "gap {gap}");
        assert!(out.trace.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn settling_merges_points_clamped_together() {
        let data = noisy(20);
        let xm = DMatrix::from_column_slice(4, 1, &[-9.0, 0.3, 7.0, 8.0]);
        let out = settle_inducing(xm, &data, 1.0).unwrap();
        assert_eq!(out.as_slice(), &[-3.0, 0.3, 3.0]);
        let model = SgpModel::fit(&data, &hyp(1.0, 0.5, 0.1), &out, 0.1).unwrap();
        assert_eq!(model.m(), 3);
    }
}
