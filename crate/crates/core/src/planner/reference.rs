//! Cubic uniform B-spline references with constant-speed time allocation.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{normalize_angle, yaw_rotation, ControlInput, State};
use crate::error::{Error, Result};
use crate::nmpc::ReferenceSlice;

/// Minimum separation between consecutive waypoints, meters.
pub const MIN_WAYPOINT_GAP: f64 = 1e-6;

const ARC_SAMPLES_PER_SPAN: usize = 256;
const HORIZONTAL_EPS: f64 = 1e-9;

/// Uniform cubic B-spline whose end control points are tripled, so the curve
/// starts at the first waypoint and ends at the last.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicBSpline {
    ctrl: Vec<Vector3<f64>>,
}

fn basis(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

fn basis_derivative(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -v * v / 2.0,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        u * u / 2.0,
    ]
}

impl CubicBSpline {
    pub fn through(waypoints: &[Vector3<f64>]) -> Result<Self> {
        if waypoints.len() < 4 {
            return Err(Error::Domain(format!(
                "a cubic B-spline needs at least 4 waypoints, got {}",
                waypoints.len()
            )));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !w.iter().all(|c| c.is_finite()) {
                return Err(Error::Domain(format!("waypoint {i} is not finite")));
            }
        }
        for i in 1..waypoints.len() {
            if (waypoints[i] - waypoints[i - 1]).norm() < MIN_WAYPOINT_GAP {
                return Err(Error::Domain(format!("waypoints {} and {i} coincide", i - 1)));
            }
        }
        let first = waypoints[0];
        let last = waypoints[waypoints.len() - 1];
        let mut ctrl = vec![first, first];
        ctrl.extend_from_slice(waypoints);
        ctrl.extend([last, last]);
        Ok(Self { ctrl })
    }

    /// Number of polynomial spans; the parameter runs over `[0, spans]`.
    pub fn spans(&self) -> usize {
        self.ctrl.len() - 3
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.spans();
        let s = s.clamp(0.0, n as f64);
        let seg = (s.floor() as usize).min(n - 1);
        (seg, s - seg as f64)
    }

    fn combine(&self, seg: usize, w: [f64; 4]) -> Vector3<f64> {
        (0..4).fold(Vector3::zeros(), |acc, j| acc + self.ctrl[seg + j] * w[j])
    }

    pub fn point(&self, s: f64) -> Vector3<f64> {
        let (seg, u) = self.locate(s);
        self.combine(seg, basis(u))
    }

    pub fn derivative(&self, s: f64) -> Vector3<f64> {
        let (seg, u) = self.locate(s);
        self.combine(seg, basis_derivative(u))
    }

    /// Largest parametric speed with one span per second.
    pub fn natural_peak_speed(&self) -> f64 {
        let total = self.spans() * ARC_SAMPLES_PER_SPAN;
        (0..=total)
            .map(|i| self.derivative(i as f64 / ARC_SAMPLES_PER_SPAN as f64).norm())
            .fold(0.0, f64::max)
    }
}

/// Five-point Gauss-Legendre nodes and weights on `[-1, 1]`.
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
    0.236_926_885_056_189_08,
];

/// Arc length of the spline between parameters `a ≤ b` inside one span.
fn arc_between(spline: &CubicBSpline, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS)
        .map(|(x, w)| w * spline.derivative(mid + half * x).norm())
        .sum::<f64>()
        * half
}

/// Cumulative arc length on a fine parameter grid, inverted by bisection.
struct ArcTable<'a> {
    spline: &'a CubicBSpline,
    params: Vec<f64>,
    lengths: Vec<f64>,
}

impl<'a> ArcTable<'a> {
    fn new(spline: &'a CubicBSpline) -> Self {
        let total = spline.spans() * ARC_SAMPLES_PER_SPAN;
        let mut params = Vec::with_capacity(total + 1);
        let mut lengths = Vec::with_capacity(total + 1);
        let mut acc = 0.0;
        for i in 0..=total {
            let s = i as f64 / ARC_SAMPLES_PER_SPAN as f64;
            if let Some(&prev) = params.last() {
                acc += arc_between(spline, prev, s);
            }
            params.push(s);
            lengths.push(acc);
        }
        Self { spline, params, lengths }
    }

    fn total(&self) -> f64 {
        *self.lengths.last().unwrap_or(&0.0)
    }

    fn param_at(&self, arc: f64) -> f64 {
        let arc = arc.clamp(0.0, self.total());
        let hi = self.lengths.partition_point(|&l| l < arc).min(self.lengths.len() - 1);
        if hi == 0 {
            return self.params[0];
        }
        let (s0, l0) = (self.params[hi - 1], self.lengths[hi - 1]);
        let (mut lo, mut up) = (s0, self.params[hi]);
        for _ in 0..60 {
            let mid = 0.5 * (lo + up);
            if l0 + arc_between(self.spline, s0, mid) < arc {
                lo = mid;
            } else {
                up = mid;
            }
        }
        0.5 * (lo + up)
    }
}

fn unit_tangent(spline: &CubicBSpline, s: f64) -> Vector3<f64> {
    let d = spline.derivative(s);
    if d.norm() > 1e-9 {
        return d.normalize();
    }
    // Tripled end points flatten the first two derivatives.
    let h = 1e-2;
    let chord = if s + h <= spline.spans() as f64 {
        spline.point(s + h) - spline.point(s)
    } else {
        spline.point(s) - spline.point(s - h)
    };
    if chord.norm() > 0.0 {
        chord.normalize()
    } else {
        Vector3::zeros()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub t: f64,
    pub x: State,
    /// Body-frame velocity command and yaw rate.
    pub u: ControlInput,
}

/// Time-indexed reference on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    samples: Vec<ReferenceSample>,
    dt: f64,
    source_waypoints: Vec<Vector3<f64>>,
    speed: f64,
}

/// Builds a constant-speed reference along the B-spline through `waypoints`.
///
/// The speed is `min(v_max, natural peak speed)`. Yaw follows the horizontal
/// direction of travel and is held where the motion is vertical. Each
/// command moves the nominal model exactly onto the next sample; the last
/// sample carries the tangent velocity.
pub fn generate_reference(waypoints: &[Vector3<f64>], v_max: f64, dt: f64) -> Result<ReferenceTrajectory> {
    if !(v_max > 0.0) || !v_max.is_finite() {
        return Err(Error::Domain(format!("v_max must be positive, got {v_max}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    let spline = CubicBSpline::through(waypoints)?;
    let table = ArcTable::new(&spline);
    let length = table.total();
    let speed = v_max.min(spline.natural_peak_speed());
    let duration = length / speed;
    let steps = ((duration / dt) - 1e-9).ceil().max(1.0) as usize;

    let mut positions = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let arc = (speed * dt * k as f64).min(length);
        let s = table.param_at(arc);
        positions.push(spline.point(s));
        velocities.push(unit_tangent(&spline, s) * speed);
    }

    let mut yaws = vec![f64::NAN; steps + 1];
    for k in 0..=steps {
        let v = velocities[k];
        if v.x.hypot(v.y) > HORIZONTAL_EPS {
            yaws[k] = v.y.atan2(v.x);
        } else if k > 0 {
            yaws[k] = yaws[k - 1];
        }
    }
    let first_defined = yaws.iter().copied().find(|a| a.is_finite()).unwrap_or(0.0);
    for a in yaws.iter_mut() {
        if !a.is_finite() {
            *a = first_defined;
        } else {
            break;
        }
    }

    let samples = (0..=steps)
        .map(|k| {
            let alpha = normalize_angle(yaws[k]);
            let omega = if k < steps {
                normalize_angle(yaws[k + 1] - yaws[k]) / dt
            } else {
                0.0
            };
            let v_world = if k < steps {
                (positions[k + 1] - positions[k]) / dt
            } else {
                velocities[k]
            };
            let v_body = yaw_rotation(alpha).transpose() * v_world;
            ReferenceSample {
                t: dt * k as f64,
                x: State { p: positions[k], alpha },
                u: ControlInput::new(v_body, omega),
            }
        })
        .collect();
    Ok(ReferenceTrajectory {
        samples,
        dt,
        source_waypoints: waypoints.to_vec(),
        speed,
    })
}

impl ReferenceTrajectory {
    pub fn samples(&self) -> &[ReferenceSample] {
        &self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn source_waypoints(&self) -> &[Vector3<f64>] {
        &self.source_waypoints
    }

    /// Constant travel speed, m/s.
    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start(&self) -> State {
        self.samples[0].x
    }

    pub fn end(&self) -> State {
        self.samples[self.samples.len() - 1].x
    }

    /// Horizon window starting at sample `start`. Past the end the final
    /// state is repeated with a zero command.
    pub fn slice(&self, start: usize, horizon: usize) -> Result<ReferenceSlice> {
        let last = self.samples.len() - 1;
        let states = (0..=horizon)
            .map(|i| self.samples[(start + i).min(last)].x)
            .collect();
        let controls = (0..horizon)
            .map(|i| {
                let k = start + i;
                if k < last {
                    self.samples[k].u
                } else {
                    ControlInput::zero()
                }
            })
            .collect();
        ReferenceSlice::new(states, controls)
    }

    /// Index and distance of the sample nearest to `p` among samples `from..`.
    pub fn nearest_from(&self, from: usize, p: &Vector3<f64>) -> (usize, f64) {
        let from = from.min(self.samples.len() - 1);
        self.samples[from..]
            .iter()
            .enumerate()
            .map(|(i, s)| (from + i, (s.x.p - p).norm()))
            .fold((from, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "z", "yaw", "vx", "vy", "vz", "omega"])?;
        for s in &self.samples {
            let row = [s.t, s.x.p.x, s.x.p.y, s.x.p.z, s.x.alpha, s.u.v.x, s.u.v.y, s.u.v.z, s.u.omega];
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads samples written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut samples: Vec<ReferenceSample> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 9 {
                return Err(Error::Data(format!("reference row {} has {} fields, expected 9", line + 1, rec.len())));
            }
            let mut vals = [0.0; 9];
            for (j, v) in vals.iter_mut().enumerate() {
                *v = rec[j]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Data(format!("reference row {} field {j}: {e}", line + 1)))?;
            }
            samples.push(ReferenceSample {
                t: vals[0],
                x: State::new(Vector3::new(vals[1], vals[2], vals[3]), vals[4])?,
                u: ControlInput::new(Vector3::new(vals[5], vals[6], vals[7]), vals[8]),
            });
        }
        if samples.len() < 2 {
            return Err(Error::Data("reference needs at least two samples".into()));
        }
        let dt = samples[1].t - samples[0].t;
        if !(dt > 0.0) {
            return Err(Error::Data("reference time stamps must increase".into()));
        }
        for w in samples.windows(2) {
            if ((w[1].t - w[0].t) - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::Data(format!("non-uniform time grid at t={}", w[1].t)));
            }
        }
        let speed = samples.iter().map(|s| s.u.v.norm()).fold(0.0, f64::max);
        Ok(Self {
            samples,
            dt,
            source_waypoints: Vec::new(),
            speed,
        })
    }
}
