//! Exact GP regression: the reference against which the sparse model is
//! checked, and the hyperparameter-fitting engine.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kernel::{covariance_vector, cross_covariance, sq_dist_matrix, KernelHyperparams};
use super::optim::{maximize, AscentOptions, AscentResult};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, inverse_from_factor, log_det_from_factor};

/// Training inputs (one row per point) and centered targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    mean: f64,
}

impl GpDataset {
    /// Centers `targets` and stores the removed mean.
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || targets.len() != n {
            return Err(Error::Dimension(format!(
                "dataset needs n >= 1 matching rows, got {} inputs and {} targets",
                n,
                targets.len()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in GP dataset".into()));
        }
        let mean = targets.mean();
        Ok(Self {
            inputs,
            targets: targets.add_scalar(-mean),
            mean,
        })
    }

    /// One-dimensional inputs.
    pub fn from_scalar(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_column_slice(xs.len(), 1, xs),
            DVector::from_column_slice(ys),
        )
    }

    /// Rebuilds a dataset whose targets are already centered.
    pub fn from_centered(inputs: DMatrix<f64>, targets: DVector<f64>, mean: f64) -> Result<Self> {
        let mut d = Self::new(inputs, targets.clone())?;
        d.targets = targets;
        d.mean = mean;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    /// Centered targets.
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Scales the centered targets (the stored mean scales too).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            inputs: self.inputs.clone(),
            targets: &self.targets * c,
            mean: self.mean * c,
        }
    }

    /// Indices of the first pair of identical input rows, if any.
    pub fn duplicate_pair(&self) -> Option<(usize, usize)> {
        duplicate_rows(&self.inputs)
    }
}

pub(crate) fn duplicate_rows(x: &DMatrix<f64>) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let row = |i: usize| x.row(i).iter().copied().collect::<Vec<_>>();
    order.sort_by(|&a, &b| row(a).partial_cmp(&row(b)).unwrap_or(std::cmp::Ordering::Equal));
    order
        .windows(2)
        .find(|w| row(w[0]) == row(w[1]))
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
}

/// A fitted exact GP with its cached factorization.
#[derive(Debug, Clone)]
pub struct ExactGp {
    data: GpDataset,
    hyp: KernelHyperparams,
    chol: DMatrix<f64>,
    weights: DVector<f64>,
}

fn training_covariance(data: &GpDataset, hyp: &KernelHyperparams) -> DMatrix<f64> {
    let mut k = cross_covariance(data.inputs(), data.inputs(), hyp);
    let s2 = hyp.noise_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    k
}

impl ExactGp {
    pub fn fit(data: &GpDataset, hyp: &KernelHyperparams) -> Result<Self> {
        if hyp.noise_variance() == 0.0 {
            if let Some((i, j)) = data.duplicate_pair() {
                return Err(Error::SingularKernel(format!(
                    "inputs {i} and {j} coincide and the noise level is zero"
                )));
            }
        }
        let k = training_covariance(data, hyp);
        let (ch, _) = cholesky_jittered(&k, 0.0, hyp.signal_variance())?;
        let weights = ch.solve(data.targets());
        Ok(Self {
            data: data.clone(),
            hyp: *hyp,
            chol: ch.unpack(),
            weights,
        })
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyp
    }

    pub fn data(&self) -> &GpDataset {
        &self.data
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Posterior mean (data mean restored) and latent variance at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = covariance_vector(x, self.data.inputs(), &self.hyp);
        let mean = ks.dot(&self.weights) + self.data.mean();
        let v = self
            .chol
            .solve_lower_triangular(&ks)
            .expect("positive factor");
        let var = (self.hyp.signal_variance() - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// `-½ yᵀ(K+σ²I)⁻¹y − ½ log|K+σ²I| − n/2 log 2π` on centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len() as f64;
        -0.5 * self.data.targets().dot(&self.weights)
            - 0.5 * log_det_from_factor(&self.chol)
            - 0.5 * n * (2.0 * PI).ln()
    }

    /// Gradient of the log marginal likelihood w.r.t. `[ln σ_f, ln l, ln σ_n]`.
    pub fn lml_gradient(&self) -> [f64; 3] {
        let x = self.data.inputs();
        let kinv = inverse_from_factor(&self.chol);
        let outer = &self.weights * self.weights.transpose();
        let w = outer - kinv;
        let kse = cross_covariance(x, x, &self.hyp);
        let d2 = sq_dist_matrix(x, x);
        let l2 = self.hyp.length_scale().powi(2);
        let mut g = [0.0; 3];
        for j in 0..x.nrows() {
            for i in 0..x.nrows() {
                let wij = w[(i, j)];
                g[0] += wij * 2.0 * kse[(i, j)];
                g[1] += wij * kse[(i, j)] * d2[(i, j)] / l2;
            }
            g[2] += w[(j, j)] * 2.0 * self.hyp.noise_variance();
        }
        g.map(|v| 0.5 * v)
    }

    pub fn to_record(&self) -> ExactGpRecord {
        ExactGpRecord {
            hyperparams: self.hyp,
            inputs: rows_of(self.data.inputs()),
            targets: self.data.targets().iter().copied().collect(),
            weights: self.weights.iter().copied().collect(),
            data_mean: self.data.mean(),
        }
    }

    pub fn from_record(rec: &ExactGpRecord) -> Result<Self> {
        let inputs = matrix_from_rows(&rec.inputs)?;
        let data = GpDataset::from_centered(
            inputs,
            DVector::from_column_slice(&rec.targets),
            rec.data_mean,
        )?;
        Self::fit(&data, &rec.hyperparams)
    }
}

/// Serialized form of an [`ExactGp`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExactGpRecord {
    pub hyperparams: KernelHyperparams,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub data_mean: f64,
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged input rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Log marginal likelihood and its log-space gradient for `hyp`.
pub fn lml_and_gradient(data: &GpDataset, hyp: &KernelHyperparams) -> Result<(f64, [f64; 3])> {
    let gp = ExactGp::fit(data, hyp)?;
    Ok((gp.log_marginal_likelihood(), gp.lml_gradient()))
}

/// Gradient ascent on the log marginal likelihood in log-parameter space.
pub fn optimize_hyperparams(
    data: &GpDataset,
    init: &KernelHyperparams,
    opts: &AscentOptions,
) -> Result<(KernelHyperparams, AscentResult)> {
    if data.len() < 3 {
        return Err(Error::Data(format!(
            "hyperparameter fitting needs at least 3 points, got {}",
            data.len()
        )));
    }
    let start = DVector::from_column_slice(&init.to_log());
    let objective = |p: &DVector<f64>| {
        let hyp = KernelHyperparams::from_log([p[0], p[1], p[2]])?;
        let (f, g) = lml_and_gradient(data, &hyp)?;
        Ok((f, DVector::from_column_slice(&g)))
    };
    let res = maximize(objective, start, opts).map_err(|e| match e {
        Error::Optimizer {
            message,
            iteration,
            objective,
        } => Error::Optimizer {
            message: format!("{message}; initial hyperparameters {init:?}"),
            iteration,
            objective,
        },
        other => other,
    })?;
    let hyp = KernelHyperparams::from_log([res.params[0], res.params[1], res.params[2]])?;
    Ok((hyp, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hyp(sf: f64, l: f64, sn: f64) -> KernelHyperparams {
        KernelHyperparams::new(sf, l, sn).unwrap()
    }

    #[test]
    fn single_centered_point_reverts_to_zero() {
        let d = GpDataset::from_scalar(&[0.0], &[0.0]).unwrap();
        let gp = ExactGp::fit(&d, &hyp(1.0, 1.0, 0.1)).unwrap();
        let (m, v) = gp.predict(&[50.0]);
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scalar_lml_closed_form() {
        let d = GpDataset::from_scalar(&[0.0], &[0.0]).unwrap();
        let gp = ExactGp::fit(&d, &hyp(1.0, 1.0, 1.0)).unwrap();
        let expected = -0.5 * 2f64.ln() - 0.5 * (2.0 * PI).ln();
        assert_abs_diff_eq!(gp.log_marginal_likelihood(), expected, epsilon = 1e-14);
    }

    #[test]
    fn duplicate_noiseless_inputs_are_singular() {
        let d = GpDataset::from_scalar(&[0.5, 0.5, 1.0], &[1.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            ExactGp::fit(&d, &hyp(1.0, 1.0, 0.0)),
            Err(Error::SingularKernel(_))
        ));
    }

    #[test]
    fn interpolates_three_points() {
        let xs = [-1.0, 0.2, 1.5];
        let ys = [0.3, -0.7, 1.1];
        let d = GpDataset::from_scalar(&xs, &ys).unwrap();
        let gp = ExactGp::fit(&d, &hyp(1.0, 0.8, 1e-6)).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert_abs_diff_eq!(gp.predict(&[*x]).0, y, epsilon = 1e-4);
        }
    }

    #[test]
    fn record_round_trip_preserves_predictions() {
        let d = GpDataset::from_scalar(&[-1.0, 0.0, 0.7, 2.0], &[0.1, 0.4, -0.2, 0.3]).unwrap();
        let gp = ExactGp::fit(&d, &hyp(0.9, 0.6, 0.05)).unwrap();
        let json = serde_json::to_string(&gp.to_record()).unwrap();
        let back = ExactGp::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        for x in [-2.0, 0.3, 1.1] {
            assert_eq!(gp.predict(&[x]), back.predict(&[x]));
        }
    }

    #[test]
    fn too_few_points_for_optimization() {
        let d = GpDataset::from_scalar(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(optimize_hyperparams(&d, &hyp(1.0, 1.0, 0.1), &AscentOptions::default()).is_err());
    }
}
