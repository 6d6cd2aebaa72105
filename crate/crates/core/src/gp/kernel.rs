//! Squared-exponential kernel and its hyperparameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SE kernel hyperparameters, held in log-space.
///
/// A zero noise level is representable (`ln 0 = -inf`) so that the
/// noiseless limit can be expressed; the optimizers require all three
/// log-values to be finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HyperparamRecord", into = "HyperparamRecord")]
pub struct KernelHyperparams {
    log_sigma_f: f64,
    log_length: f64,
    log_sigma_n: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct HyperparamRecord {
    sigma_f: f64,
    length_scale: f64,
    sigma_n: f64,
}

impl TryFrom<HyperparamRecord> for KernelHyperparams {
    type Error = Error;
    fn try_from(r: HyperparamRecord) -> Result<Self> {
        KernelHyperparams::new(r.sigma_f, r.length_scale, r.sigma_n)
    }
}

impl From<KernelHyperparams> for HyperparamRecord {
    fn from(h: KernelHyperparams) -> Self {
        HyperparamRecord {
            sigma_f: h.sigma_f(),
            length_scale: h.length_scale(),
            sigma_n: h.sigma_n(),
        }
    }
}

impl KernelHyperparams {
    pub fn new(sigma_f: f64, length_scale: f64, sigma_n: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(sigma_f) || !ok(length_scale) || !(sigma_n.is_finite() && sigma_n >= 0.0) {
            return Err(Error::Domain(format!(
                "invalid kernel hyperparameters sigma_f={sigma_f} l={length_scale} sigma_n={sigma_n}"
            )));
        }
        Ok(Self {
            log_sigma_f: sigma_f.ln(),
            log_length: length_scale.ln(),
            log_sigma_n: sigma_n.ln(),
        })
    }

    /// Builds hyperparameters from `[ln σ_f, ln l, ln σ_n]`.
    pub fn from_log(log: [f64; 3]) -> Result<Self> {
        if log.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite log hyperparameters {log:?}")));
        }
        Ok(Self {
            log_sigma_f: log[0],
            log_length: log[1],
            log_sigma_n: log[2],
        })
    }

    pub fn to_log(&self) -> [f64; 3] {
        [self.log_sigma_f, self.log_length, self.log_sigma_n]
    }

    pub fn sigma_f(&self) -> f64 {
        self.log_sigma_f.exp()
    }

    pub fn length_scale(&self) -> f64 {
        self.log_length.exp()
    }

    pub fn sigma_n(&self) -> f64 {
        self.log_sigma_n.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        (2.0 * self.log_sigma_f).exp()
    }

    pub fn noise_variance(&self) -> f64 {
        (2.0 * self.log_sigma_n).exp()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `σ_f² exp(-|x1 - x2|² / 2l²)`. Noise never enters here.
pub fn se_kernel(x1: &[f64], x2: &[f64], hyp: &KernelHyperparams) -> f64 {
    let l2 = hyp.length_scale().powi(2);
    hyp.signal_variance() * (-0.5 * sq_dist(x1, x2) / l2).exp()
}

/// Squared distances between the rows of `a` and the rows of `b`.
pub fn sq_dist_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                let d = a[(i, k)] - b[(j, k)];
                s += d * d;
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Cross-covariance between the rows of `a` and `b`.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>, hyp: &KernelHyperparams) -> DMatrix<f64> {
    let sf2 = hyp.signal_variance();
    let inv = -0.5 / hyp.length_scale().powi(2);
    sq_dist_matrix(a, b).map(|d| sf2 * (d * inv).exp())
}

/// Covariance between a single point and the rows of `a`.
pub fn covariance_vector(x: &[f64], a: &DMatrix<f64>, hyp: &KernelHyperparams) -> DVector<f64> {
    let sf2 = hyp.signal_variance();
    let inv = -0.5 / hyp.length_scale().powi(2);
    DVector::from_fn(a.nrows(), |i, _| {
        let mut s = 0.0;
        for k in 0..a.ncols() {
            let d = x[k] - a[(i, k)];
            s += d * d;
        }
        sf2 * (s * inv).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_known_values() {
        let h = KernelHyperparams::new(1.0, 1.0, 0.1).unwrap();
        assert_eq!(se_kernel(&[0.3], &[0.3], &h), 1.0);
        assert!((se_kernel(&[0.0], &[1.0], &h) - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_hyperparameters() {
        assert!(KernelHyperparams::new(0.0, 1.0, 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, -1.0, 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, 1.0, f64::NAN).is_err());
        assert!(KernelHyperparams::new(1.0, 1.0, 0.0).is_ok());
        assert!(KernelHyperparams::from_log([0.0, 0.0, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let h = KernelHyperparams::new(0.123_456_789_012_345_67, 2.5e-3, 1.0 / 3.0).unwrap();
        let s = serde_json::to_string(&h).unwrap();
        let back: KernelHyperparams = serde_json::from_str(&s).unwrap();
        assert!((back.sigma_f() - h.sigma_f()).abs() <= 1e-16 * h.sigma_f());
        assert!((back.length_scale() - h.length_scale()).abs() <= 1e-18);
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 2),
            b in prop::collection::vec(-5.0f64..5.0, 2),
            sf in 0.1f64..3.0, l in 0.1f64..3.0,
        ) {
            let h = KernelHyperparams::new(sf, l, 0.1).unwrap();
            let kab = se_kernel(&a, &b, &h);
            prop_assert_eq!(kab, se_kernel(&b, &a, &h));
            prop_assert!(kab <= sf * sf + 1e-15 && kab >= 0.0);
        }
    }
}
