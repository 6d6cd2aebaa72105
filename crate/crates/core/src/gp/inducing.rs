//! Inducing-point initialization by weighted k-means.
//!
//! With a positive bias `b`, sample `i` carries weight `exp(-|x_i| / b)`, so
//! centers concentrate where the input magnitude (here: velocity) is small.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exact::GpDataset;
use crate::error::{Error, Result};

const LLOYD_ITERS: usize = 100;

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distinct input rows in first-seen order.
pub fn distinct_inputs(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let mut rows: Vec<(Vec<f64>, usize)> = (0..x.nrows()).map(|i| (row(x, i), i)).collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup_by(|a, b| a.0 == b.0);
    rows.sort_by_key(|r| r.1);
    rows.into_iter().map(|r| r.0).collect()
}

/// Sample weights used by the low-velocity bias.
pub fn bias_weights(x: &DMatrix<f64>, bias: f64) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            if bias > 0.0 {
                let norm = x.row(i).norm();
                (-norm / bias).exp()
            } else {
                1.0
            }
        })
        .collect()
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Picks `m` distinct inducing inputs by (weighted) k-means.
pub fn select_inducing_points(data: &GpDataset, m: usize, bias: f64, seed: u64) -> Result<DMatrix<f64>> {
    let x = data.inputs();
    let d = x.ncols();
    if m == 0 {
        return Err(Error::Domain("at least one inducing point is required".into()));
    }
    if !(bias >= 0.0) || !bias.is_finite() {
        return Err(Error::Domain(format!("bias must be finite and >= 0, got {bias}")));
    }
    let distinct = distinct_inputs(x);
    if m > distinct.len() {
        return Err(Error::Domain(format!(
            "{m} inducing points requested but only {} distinct inputs exist",
            distinct.len()
        )));
    }
    if m == distinct.len() {
        return Ok(DMatrix::from_fn(m, d, |i, j| distinct[i][j]));
    }

    let n = x.nrows();
    let pts: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let w = bias_weights(x, bias);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding on the weighted samples.
    let mut centers: Vec<Vec<f64>> = vec![pts[weighted_pick(&mut rng, &w)].clone()];
    let mut best: Vec<f64> = pts.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < m {
        let scores: Vec<f64> = best.iter().zip(&w).map(|(d2, wi)| d2 * wi).collect();
        let idx = if scores.iter().sum::<f64>() > 0.0 {
            weighted_pick(&mut rng, &scores)
        } else {
            // All remaining mass sits on existing centers; take any new distinct input.
            match distinct.iter().position(|p| !centers.contains(p)) {
                Some(k) => pts.iter().position(|p| *p == distinct[k]).unwrap_or(0),
                None => break,
            }
        };
        let c = pts[idx].clone();
        for (b, p) in best.iter_mut().zip(&pts) {
            *b = b.min(dist2(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let k = (0..centers.len())
                .min_by(|&a, &b| {
                    dist2(p, &centers[a])
                        .partial_cmp(&dist2(p, &centers[b]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut mass = vec![0.0; m];
        for (i, p) in pts.iter().enumerate() {
            let k = assign[i];
            mass[k] += w[i];
            for j in 0..d {
                sums[k][j] += w[i] * p[j];
            }
        }
        for k in 0..m {
            if mass[k] > 0.0 {
                centers[k] = sums[k].iter().map(|s| s / mass[k]).collect();
            } else {
                // Empty cluster: move it to the worst-served sample.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = w[a] * dist2(&pts[a], &centers[assign[a]]);
                        let db = w[b] * dist2(&pts[b], &centers[assign[b]]);
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap_or(0);
                centers[k] = pts[far].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Guarantee distinct centers.
    for k in 1..m {
        while centers[..k].contains(&centers[k]) {
            let spare = distinct
                .iter()
                .filter(|p| !centers.contains(p))
                .max_by(|a, b| {
                    let da = centers.iter().map(|c| dist2(a, c)).fold(f64::INFINITY, f64::min);
                    let db = centers.iter().map(|c| dist2(b, c)).fold(f64::INFINITY, f64::min);
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .cloned();
            match spare {
                Some(p) => centers[k] = p,
                None => break,
            }
        }
    }

    Ok(DMatrix::from_fn(m, d, |i, j| centers[i][j]))
}
