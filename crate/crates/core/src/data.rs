//! Residual datasets collected from closed-loop runs, splitting and RMSE metrics.

use std::collections::HashSet;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::world_velocity;
use crate::error::{Error, Result};
use crate::gp::GpDataset;
use crate::planner::RunLog;
use crate::residual::ResidualModel;

pub const DATASET_HEADER: [&str; 10] = [
    "vbar_x", "vbar_y", "vbar_z", "vhat_x", "vhat_y", "vhat_z", "delta", "y_x", "y_y", "y_z",
];

/// One control application: commanded and measured world-frame velocity and
/// the residual rate `y = (v̂ − v̄)/δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub v_bar: Vector3<f64>,
    pub v_hat: Vector3<f64>,
    pub delta: f64,
    pub y: Vector3<f64>,
}

impl ResidualRow {
    pub fn new(v_bar: Vector3<f64>, v_hat: Vector3<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Data(format!("delta must be positive, got {delta}")));
        }
        if !v_bar.iter().chain(v_hat.iter()).all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite velocity in residual row".into()));
        }
        Ok(Self {
            v_bar,
            v_hat,
            delta,
            y: (v_hat - v_bar) / delta,
        })
    }

    fn key(&self) -> [u64; 7] {
        let b = |v: f64| v.to_bits();
        [
            b(self.v_bar.x),
            b(self.v_bar.y),
            b(self.v_bar.z),
            b(self.v_hat.x),
            b(self.v_hat.y),
            b(self.v_hat.z),
            b(self.delta),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualDataset {
    rows: Vec<ResidualRow>,
}

impl ResidualDataset {
    pub fn new(rows: Vec<ResidualRow>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[ResidualRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: &ResidualDataset) {
        self.rows.extend_from_slice(&other.rows);
    }

    /// The common sampling interval, or an error when rows disagree.
    pub fn delta(&self) -> Result<f64> {
        let first = self
            .rows
            .first()
            .ok_or_else(|| Error::Data("empty residual dataset".into()))?
            .delta;
        if self.rows.iter().any(|r| (r.delta - first).abs() > 1e-12 * first) {
            return Err(Error::Data("rows use different sampling intervals".into()));
        }
        Ok(first)
    }

    /// Per-axis mean of `y`, removed before GP fitting.
    pub fn axis_means(&self) -> [f64; 3] {
        let n = self.rows.len().max(1) as f64;
        [0, 1, 2].map(|k| self.rows.iter().map(|r| r.y[k]).sum::<f64>() / n)
    }

    /// Scalar GP dataset for axis `k`: input `v̄_k`, centered target `y_k`.
    pub fn axis_dataset(&self, k: usize) -> Result<GpDataset> {
        if k > 2 {
            return Err(Error::Dimension(format!("axis {k} out of range")));
        }
        let xs: Vec<f64> = self.rows.iter().map(|r| r.v_bar[k]).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.y[k]).collect();
        GpDataset::new(DMatrix::from_column_slice(xs.len(), 1, &xs), DVector::from_vec(ys))
    }

    /// Rows at the given indices.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(DATASET_HEADER)?;
        for r in &self.rows {
            let vals = [
                r.v_bar.x, r.v_bar.y, r.v_bar.z, r.v_hat.x, r.v_hat.y, r.v_hat.z, r.delta, r.y.x, r.y.y, r.y.z,
            ];
            w.write_record(vals.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset CSV; the header must match exactly and every stored
    /// `y` must agree with the velocities it was computed from.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names != DATASET_HEADER {
            let missing: Vec<&str> = DATASET_HEADER.iter().copied().filter(|h| !names.contains(h)).collect();
            return Err(Error::Data(format!(
                "dataset header mismatch (missing {missing:?}); expected {}",
                DATASET_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut v = [0.0; 10];
            for (j, slot) in v.iter_mut().enumerate() {
                *slot = rec
                    .get(j)
                    .ok_or_else(|| Error::Data(format!("dataset row {} is short", line + 1)))?
                    .trim()
                    .parse()
                    .map_err(|e| Error::Data(format!("dataset row {} column `{}`: {e}", line + 1, DATASET_HEADER[j])))?;
            }
            let row = ResidualRow::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]), v[6])?;
            let stored = Vector3::new(v[7], v[8], v[9]);
            if (stored - row.y).amax() > 1e-9 * row.y.amax().max(1.0) {
                return Err(Error::Data(format!(
                    "dataset row {}: y does not equal (vhat - vbar)/delta",
                    line + 1
                )));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// One row per control application across all logs. `v̄` is the command
/// rotated into the world frame at the start of the interval; `v̂` is the
/// plant velocity at its end.
pub fn collect(logs: &[RunLog]) -> Result<ResidualDataset> {
    let mut rows = Vec::with_capacity(logs.iter().map(|l| l.len()).sum());
    for (i, log) in logs.iter().enumerate() {
        if log.steps.is_empty() {
            continue;
        }
        if !(log.dt > 0.0) || !log.dt.is_finite() {
            return Err(Error::Data(format!("run log {i} has no usable sampling interval")));
        }
        for s in &log.steps {
            let v_bar = world_velocity(s.state.alpha, &s.control.v);
            rows.push(ResidualRow::new(v_bar, s.v_hat, log.dt)?);
        }
    }
    Ok(ResidualDataset::new(rows))
}

/// Seeded trajectory-level split: returns `(train, test)` trajectory indices.
pub fn split_trajectories(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 2 {
        return Err(Error::Data(format!("need at least 2 trajectories to split, got {count}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((count as f64 * train_fraction).round() as usize).clamp(1, count - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Errors when any row appears in both sets.
pub fn check_disjoint(train: &ResidualDataset, test: &ResidualDataset) -> Result<()> {
    let keys: HashSet<[u64; 7]> = train.rows.iter().map(ResidualRow::key).collect();
    let shared = test.rows.iter().filter(|r| keys.contains(&r.key())).count();
    if shared > 0 {
        return Err(Error::SplitOverlap(shared));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WithObstacles,
    WithoutObstacles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub scenario: Scenario,
    /// RMSE of `y·δ` pooled over the three axes, m/s.
    pub nominal_rmse: f64,
    /// RMSE of `(y − g(v̄))·δ` pooled over the three axes, m/s.
    pub augmented_rmse: f64,
    pub nominal_axis_rmse: [f64; 3],
    pub augmented_axis_rmse: [f64; 3],
    pub n_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// RMSE of the uncorrected and the model-corrected velocity residuals.
pub fn rmse_report(test: &ResidualDataset, model: &ResidualModel, scenario: Scenario) -> Result<RmseReport> {
    let n = test.len();
    if n == 0 {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut nom = [0.0; 3];
    let mut aug = [0.0; 3];
    for r in &test.rows {
        let g = model.residual_rate(&r.v_bar);
        for k in 0..3 {
            nom[k] += (r.y[k] * r.delta).powi(2);
            aug[k] += ((r.y[k] - g[k]) * r.delta).powi(2);
        }
    }
    let nf = n as f64;
    Ok(RmseReport {
        scenario,
        nominal_rmse: (nom.iter().sum::<f64>() / (3.0 * nf)).sqrt(),
        augmented_rmse: (aug.iter().sum::<f64>() / (3.0 * nf)).sqrt(),
        nominal_axis_rmse: nom.map(|s| (s / nf).sqrt()),
        augmented_axis_rmse: aug.map(|s| (s / nf).sqrt()),
        n_points: n,
        config_hash: None,
    })
}

/// [`rmse_report`] after verifying that `test` shares no rows with `train`.
pub fn nominal_and_augmented_errors(
    train: &ResidualDataset,
    test: &ResidualDataset,
    model: &ResidualModel,
    scenario: Scenario,
) -> Result<RmseReport> {
    check_disjoint(train, test)?;
    rmse_report(test, model, scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vb: f64, vh: f64) -> ResidualRow {
        ResidualRow::new(Vector3::new(vb, 0.0, 0.0), Vector3::new(vh, 0.0, 0.0), 0.1).unwrap()
    }

    #[test]
    fn residual_target_is_exact() {
        let r = ResidualRow::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.9, 2.2, 3.0), 0.1).unwrap();
        assert_eq!(r.y, (Vector3::new(0.9, 2.2, 3.0) - Vector3::new(1.0, 2.0, 3.0)) / 0.1);
        assert!(ResidualRow::new(Vector3::zeros(), Vector3::zeros(), 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let d = ResidualDataset::new(vec![row(1.0, 0.87), row(-0.3, -0.31), row(1.0 / 3.0, 0.3)]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("vbar_x,vbar_y,vbar_z,vhat_x,vhat_y,vhat_z,delta,y_x,y_y,y_z\n"));
        assert_eq!(ResidualDataset::read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn tampered_target_is_rejected() {
        let text = "vbar_x,vbar_y,vbar_z,vhat_x,vhat_y,vhat_z,delta,y_x,y_y,y_z\n1,0,0,0.9,0,0,0.1,5,0,0\n";
        assert!(ResidualDataset::read_csv(text.as_bytes()).is_err());
        let bad_header = "vbar_x,vbar_y\n1,0\n";
        let err = ResidualDataset::read_csv(bad_header.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("vhat_x"));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_trajectories(20, 0.8, 3).unwrap();
        let (c, d) = split_trajectories(20, 0.8, 3).unwrap();
        assert_eq!((a.len(), b.len()), (16, 4));
        assert_eq!((&a, &b), (&c, &d));
        assert!(a.iter().all(|i| !b.contains(i)));
        let (e, _) = split_trajectories(20, 0.8, 4).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn overlap_is_detected() {
        let train = ResidualDataset::new(vec![row(1.0, 0.9), row(0.5, 0.45)]);
        let test = ResidualDataset::new(vec![row(0.5, 0.45), row(0.2, 0.2)]);
        assert!(matches!(check_disjoint(&train, &test), Err(Error::SplitOverlap(1))));
        let zero = ResidualModel::zero();
        assert!(nominal_and_augmented_errors(&train, &test, &zero, Scenario::WithoutObstacles).is_err());
    }

    #[test]
    fn zero_model_leaves_the_error_unchanged() {
        let test = ResidualDataset::new(vec![row(1.0, 0.9), row(0.5, 0.45), row(-1.0, -0.8)]);
        let rep = rmse_report(&test, &ResidualModel::zero(), Scenario::WithoutObstacles).unwrap();
        assert_eq!(rep.nominal_rmse, rep.augmented_rmse);
        let brute = ((0.1f64.powi(2) + 0.05f64.powi(2) + 0.2f64.powi(2)) / 9.0).sqrt();
        assert!((rep.nominal_rmse - brute).abs() < 1e-12);
        assert!(rmse_report(&ResidualDataset::default(), &ResidualModel::zero(), Scenario::WithObstacles).is_err());
    }
}
