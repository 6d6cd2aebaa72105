//! Per-axis residual model used to augment the nominal dynamics.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ResidualDataset;
use crate::dynamics::ResidualSelector;
use crate::error::{Error, Result};
use crate::gp::sparse::{train_sgp, ElboReport, SgpModel, SgpRecord, SgpTrainOptions};
use crate::gp::KernelHyperparams;

/// Three independent scalar sparse GPs, one per world axis, each taking the
/// matching world-frame commanded velocity component as input.
///
/// An axis without a model contributes an exact zero.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    axes: [Option<SgpModel>; 3],
    selector: ResidualSelector,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResidualRecord {
    pub axes: [Option<SgpRecord>; 3],
    pub selector: ResidualSelector,
}

impl ResidualModel {
    pub fn new(axes: [SgpModel; 3], selector: ResidualSelector) -> Result<Self> {
        for (k, m) in axes.iter().enumerate() {
            if m.input_dim() != 1 {
                return Err(Error::Dimension(format!(
                    "axis {k} model takes {}-dimensional input, expected 1",
                    m.input_dim()
                )));
            }
        }
        let [x, y, z] = axes;
        Ok(Self {
            axes: [Some(x), Some(y), Some(z)],
            selector,
        })
    }

    /// A residual that is identically zero.
    pub fn zero() -> Self {
        Self {
            axes: [None, None, None],
            selector: ResidualSelector::default(),
        }
    }

    pub fn with_selector(mut self, selector: ResidualSelector) -> Self {
        self.selector = selector;
        self
    }

    pub fn selector(&self) -> &ResidualSelector {
        &self.selector
    }

    pub fn axis(&self, k: usize) -> Option<&SgpModel> {
        self.axes.get(k).and_then(|a| a.as_ref())
    }

    pub fn is_zero(&self) -> bool {
        self.axes.iter().all(|a| a.is_none())
    }

    /// Predicted residual rate `g(v)` per axis.
    pub fn residual_rate(&self, v_world: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|k, _| match &self.axes[k] {
            Some(m) => m.predict_mean(&[v_world[k]]),
            None => 0.0,
        })
    }

    /// Velocity correction `g(v)·δ_v` per axis.
    pub fn velocity_correction(&self, v_world: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|k, _| match &self.axes[k] {
            Some(m) => m.predict_mean(&[v_world[k]]) * m.delta_v(),
            None => 0.0,
        })
    }

    /// Correction and its per-axis derivative with respect to the matching
    /// velocity component.
    pub fn velocity_correction_with_gradient(&self, v_world: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let mut corr = Vector3::zeros();
        let mut grad = Vector3::zeros();
        for k in 0..3 {
            if let Some(m) = &self.axes[k] {
                let (mean, g) = m.predict_mean_with_gradient(&[v_world[k]]);
                corr[k] = mean * m.delta_v();
                grad[k] = g[0] * m.delta_v();
            }
        }
        (corr, grad)
    }

    /// Predictive variance of the velocity correction per axis.
    pub fn correction_variance(&self, v_world: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|k, _| match &self.axes[k] {
            Some(m) => m.predict_variance(&[v_world[k]]) * m.delta_v().powi(2),
            None => 0.0,
        })
    }

    pub fn to_record(&self) -> ResidualRecord {
        ResidualRecord {
            axes: [0, 1, 2].map(|k| self.axes[k].as_ref().map(|m| m.to_record())),
            selector: self.selector,
        }
    }

    pub fn from_record(rec: &ResidualRecord) -> Result<Self> {
        let mut axes: [Option<SgpModel>; 3] = [None, None, None];
        for k in 0..3 {
            if let Some(r) = &rec.axes[k] {
                let m = SgpModel::from_record(r)?;
                if m.input_dim() != 1 {
                    return Err(Error::Dimension(format!("axis {k} model is not scalar-input")));
                }
                axes[k] = Some(m);
            }
        }
        Ok(Self {
            axes,
            selector: rec.selector,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_record())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let rec: ResidualRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_record(&rec)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualTraining {
    pub model: ResidualModel,
    pub reports: [ElboReport; 3],
    /// Rows used for fitting after subsampling.
    pub n_used: usize,
}

/// Fits one sparse GP per axis. Datasets larger than `max_points` are
/// subsampled (seeded by `opts.seed`); `opts.delta_v` is taken from the data.
pub fn train_residual_model(
    data: &ResidualDataset,
    opts: &SgpTrainOptions,
    hyp_init: &KernelHyperparams,
    max_points: usize,
) -> Result<ResidualTraining> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let delta = data.delta()?;
    let subset = if max_points > 0 && data.len() > max_points {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
        idx.truncate(max_points);
        idx.sort_unstable();
        data.subset(&idx)
    } else {
        data.clone()
    };
    let opts = SgpTrainOptions {
        delta_v: delta,
        ..opts.clone()
    };
    let mut models = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for k in 0..3 {
        let axis = subset.axis_dataset(k)?;
        let fit = train_sgp(&axis, &opts, hyp_init)?;
        info!(
            "axis {k}: bound {:.4} after {} iterations, hyperparameters {:?}",
            fit.report.elbo, fit.trace.iterations, fit.model.hyperparams()
        );
        models.push(fit.model);
        reports.push(fit.report);
    }
    let models: [SgpModel; 3] = models.try_into().expect("three axes");
    let reports: [ElboReport; 3] = reports.try_into().expect("three axes");
    Ok(ResidualTraining {
        model: ResidualModel::new(models, ResidualSelector::default())?,
        reports,
        n_used: subset.len(),
    })
}
