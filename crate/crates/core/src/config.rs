//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::PlantConfig;
use crate::error::{Error, Result};
use crate::gp::{KernelHyperparams, SgpTrainOptions};
use crate::nmpc::NmpcConfig;
use crate::planner::{Bounds, RegenerationConfig, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgpConfig {
    /// Inducing points per axis.
    pub m: usize,
    /// Low-velocity bias of the inducing initialization, m/s.
    pub bias: f64,
    pub hyp_init: KernelHyperparams,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Training rows per axis after seeded subsampling.
    pub max_points: usize,
}

impl Default for SgpConfig {
    fn default() -> Self {
        Self {
            m: 30,
            bias: 0.5,
            hyp_init: KernelHyperparams::new(1.0, 0.5, 0.3).expect("positive defaults"),
            max_iters: 300,
            grad_tol: 1e-4,
            max_points: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub obstacle_count: usize,
    pub bounds: Bounds,
    /// Safe distance; overrides `nmpc.d_o` when given.
    pub d_o: Option<f64>,
    pub sensing_radius: f64,
    /// Obstacle-free radius around each start and goal.
    pub keep_out: f64,
    pub min_spacing: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            obstacle_count: 15,
            bounds: Bounds::default(),
            d_o: Some(1.0),
            sensing_radius: 5.0,
            keep_out: 2.5,
            min_spacing: 3.0,
        }
    }
}

/// Seeded random waypoint sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    pub waypoints: usize,
    /// Distance range between consecutive waypoints, meters.
    pub min_gap: f64,
    pub max_gap: f64,
    /// Distance kept from the world bounds, meters.
    pub inset: f64,
    /// Each trajectory flies at a speed drawn from `[min_speed, v_max]`.
    pub min_speed: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            count: 20,
            waypoints: 8,
            min_gap: 4.0,
            max_gap: 9.0,
            inset: 1.0,
            min_speed: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default)]
    pub waypoints: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    pub v_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    0.1
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            waypoints: None,
            generator: Some(GeneratorSpec::default()),
            v_max: 1.5,
            dt: default_dt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub train_fraction: f64,
    pub max_steps: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            max_steps: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub m_values: Vec<usize>,
    pub seeds: usize,
    /// Closed-loop solves timed per inducing count.
    pub timing_solves: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            m_values: vec![5, 10, 20, 30, 50],
            seeds: 5,
            timing_solves: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

fn default_goal_tolerance() -> f64 {
    0.3
}

/// NMPC defaults with the state box clipped to the default world height.
pub fn default_nmpc() -> NmpcConfig {
    let mut n = NmpcConfig::default();
    n.x_min[2] = 0.0;
    n.x_max[2] = 5.0;
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default = "default_nmpc")]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub regeneration: RegenerationConfig,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default)]
    pub sgp: SgpConfig,
    #[serde(default)]
    pub world: WorldConfig,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plant: PlantConfig::default(),
            nmpc: default_nmpc(),
            regeneration: RegenerationConfig::default(),
            goal_tolerance: default_goal_tolerance(),
            sgp: SgpConfig::default(),
            world: WorldConfig::default(),
            reference: ReferenceConfig::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Syntax and schema errors carry the line, column
    /// and offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate(self.nmpc.dt)?;
        self.run_config().validate()?;
        let r = &self.reference;
        if !(r.v_max > 0.0 && r.v_max.is_finite()) {
            return Err(Error::Config(format!("reference.v_max must be > 0, got {}", r.v_max)));
        }
        if r.v_max > self.nmpc.v_max {
            return Err(Error::Config(format!(
                "reference.v_max ({}) exceeds nmpc.v_max ({})",
                r.v_max, self.nmpc.v_max
            )));
        }
        if (r.dt - self.nmpc.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "reference.dt ({}) must equal nmpc.dt ({})",
                r.dt, self.nmpc.dt
            )));
        }
        match (&r.waypoints, &r.generator) {
            (Some(w), None) if w.len() < 4 => {
                return Err(Error::Config(format!("reference.waypoints needs at least 4 points, got {}", w.len())));
            }
            (Some(_), None) => {}
            (None, Some(g)) => {
                if g.count == 0 || g.waypoints < 4 {
                    return Err(Error::Config("reference.generator needs count >= 1 and waypoints >= 4".into()));
                }
                if !(g.min_gap > 0.0 && g.max_gap >= g.min_gap) {
                    return Err(Error::Config("reference.generator needs 0 < min_gap <= max_gap".into()));
                }
                if !(g.min_speed > 0.0 && g.min_speed <= r.v_max) {
                    return Err(Error::Config("reference.generator.min_speed must be in (0, v_max]".into()));
                }
            }
            _ => {
                return Err(Error::Config(
                    "reference needs exactly one of `waypoints` or `generator`".into(),
                ));
            }
        }
        let s = &self.sgp;
        if s.m == 0 || !(s.bias >= 0.0) || s.max_iters == 0 || !(s.grad_tol > 0.0) {
            return Err(Error::Config("sgp needs m >= 1, bias >= 0, max_iters >= 1, grad_tol > 0".into()));
        }
        let w = &self.world;
        w.bounds.validate()?;
        if !(w.sensing_radius > 0.0) {
            return Err(Error::Config(format!("world.sensing_radius must be > 0, got {}", w.sensing_radius)));
        }
        if let Some(d) = w.d_o {
            if !(d > 0.0) {
                return Err(Error::Config(format!("world.d_o must be > 0, got {d}")));
            }
        }
        if !(self.evaluation.train_fraction > 0.0 && self.evaluation.train_fraction < 1.0) {
            return Err(Error::Config("evaluation.train_fraction must be in (0, 1)".into()));
        }
        if self.evaluation.max_steps == 0 {
            return Err(Error::Config("evaluation.max_steps must be >= 1".into()));
        }
        let m = &self.sweep.m_values;
        if m.is_empty() || m.windows(2).any(|p| p[0] >= p[1]) || m[0] == 0 {
            return Err(Error::Config("sweep.m_values must be positive and strictly ascending".into()));
        }
        if self.sweep.seeds == 0 || self.sweep.timing_solves == 0 {
            return Err(Error::Config("sweep.seeds and sweep.timing_solves must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the normalized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_config(&self) -> RunConfig {
        let mut nmpc = self.nmpc.clone();
        if let Some(d) = self.world.d_o {
            nmpc.d_o = d;
        }
        RunConfig {
            nmpc,
            regeneration: self.regeneration,
            goal_tolerance: self.goal_tolerance,
        }
    }

    pub fn sgp_options(&self, m: usize, seed: u64) -> SgpTrainOptions {
        SgpTrainOptions {
            m,
            bias: self.sgp.bias,
            seed,
            max_iters: self.sgp.max_iters,
            grad_tol: self.sgp.grad_tol,
            ..SgpTrainOptions::default()
        }
    }
}
