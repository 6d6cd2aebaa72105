//! 4-DOF kinematic quadrotor model, the residual-augmented variant, RK4
//! discretization and the synthetic "true" plant used to generate data.
//!
//! State vectors are laid out as `[px, py, pz, yaw]` and control vectors as
//! `[vx, vy, vz, yaw_rate]`, with the linear velocity expressed in the body
//! (yaw-rotated) frame.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::ResidualModel;

/// Wraps an angle to `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vector3<f64>,
    pub alpha: f64,
}

impl State {
    pub fn new(p: Vector3<f64>, alpha: f64) -> Result<Self> {
        if !p.iter().all(|c| c.is_finite()) || !alpha.is_finite() {
            return Err(Error::Domain(format!("non-finite state p={p:?} alpha={alpha}")));
        }
        Ok(Self {
            p,
            alpha: normalize_angle(alpha),
        })
    }

    pub fn at(x: f64, y: f64, z: f64, alpha: f64) -> Self {
        Self {
            p: Vector3::new(x, y, z),
            alpha: normalize_angle(alpha),
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.p.x, self.p.y, self.p.z, self.alpha)
    }

    /// Builds a state from a raw vector, wrapping the yaw entry.
    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            p: Vector3::new(v[0], v[1], v[2]),
            alpha: normalize_angle(v[3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|c| c.is_finite()) && self.alpha.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: Vector3<f64>,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: Vector3<f64>, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), 0.0)
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.v.x, self.v.y, self.v.z, self.omega)
    }

    pub fn from_vector(u: &Vector4<f64>) -> Self {
        Self::new(Vector3::new(u[0], u[1], u[2]), u[3])
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|c| c.is_finite()) && self.omega.is_finite()
    }

    /// True when every velocity component and the yaw rate respect the bounds.
    pub fn within_bounds(&self, v_max: f64, omega_max: f64) -> bool {
        self.v.iter().all(|c| c.abs() <= v_max) && self.omega.abs() <= omega_max
    }
}

/// Yaw rotation taking body-frame vectors into the world frame.
pub fn yaw_rotation(alpha: f64) -> Matrix3<f64> {
    let (s, c) = alpha.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn yaw_rotation_derivative(alpha: f64) -> Matrix3<f64> {
    let (s, c) = alpha.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// World-frame velocity produced by a body-frame command at the given yaw.
pub fn world_velocity(alpha: f64, v_body: &Vector3<f64>) -> Vector3<f64> {
    yaw_rotation(alpha) * v_body
}

/// Maps the three residual outputs onto rows of the state derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSelector {
    matrix: Matrix4x3<f64>,
}

impl ResidualSelector {
    /// Residual x/y/z onto the position-derivative rows.
    pub fn position_rows() -> Self {
        let mut matrix = Matrix4x3::zeros();
        for i in 0..3 {
            matrix[(i, i)] = 1.0;
        }
        Self { matrix }
    }

    /// A selector that discards the residual entirely.
    pub fn disabled() -> Self {
        Self {
            matrix: Matrix4x3::zeros(),
        }
    }

    pub fn new(matrix: Matrix4x3<f64>) -> Result<Self> {
        if matrix.iter().any(|e| *e != 0.0 && *e != 1.0) {
            return Err(Error::Domain("selector entries must be 0 or 1".into()));
        }
        for c in 0..3 {
            if matrix.column(c).iter().filter(|e| **e != 0.0).count() > 1 {
                return Err(Error::Domain(format!(
                    "selector column {c} has more than one nonzero"
                )));
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix4x3<f64> {
        &self.matrix
    }
}

impl Default for ResidualSelector {
    fn default() -> Self {
        Self::position_rows()
    }
}

/// Continuous-time dynamics `ẋ = f(x, u)` with analytic Jacobians.
pub trait MotionModel: Sync {
    fn derivative(&self, x: &Vector4<f64>, u: &Vector4<f64>) -> Vector4<f64>;

    /// Returns `(f, ∂f/∂x, ∂f/∂u)`.
    fn derivative_jacobians(
        &self,
        x: &Vector4<f64>,
        u: &Vector4<f64>,
    ) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>);
}

/// `ṗ = R_yaw(α)·v`, `α̇ = ω`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalModel;

impl MotionModel for NominalModel {
    fn derivative(&self, x: &Vector4<f64>, u: &Vector4<f64>) -> Vector4<f64> {
        let pd = world_velocity(x[3], &u.fixed_rows::<3>(0).into_owned());
        Vector4::new(pd.x, pd.y, pd.z, u[3])
    }

    fn derivative_jacobians(
        &self,
        x: &Vector4<f64>,
        u: &Vector4<f64>,
    ) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
        let v = u.fixed_rows::<3>(0).into_owned();
        let rot = yaw_rotation(x[3]);
        let pd = rot * v;
        let dpd_dalpha = yaw_rotation_derivative(x[3]) * v;
        let mut jx = Matrix4::zeros();
        jx.fixed_view_mut::<3, 1>(0, 3).copy_from(&dpd_dalpha);
        let mut ju = Matrix4::zeros();
        ju.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        ju[(3, 3)] = 1.0;
        (Vector4::new(pd.x, pd.y, pd.z, u[3]), jx, ju)
    }
}

/// Nominal model plus the selector-mapped residual correction.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedModel<'a> {
    pub residual: &'a ResidualModel,
}

impl<'a> AugmentedModel<'a> {
    pub fn new(residual: &'a ResidualModel) -> Self {
        Self { residual }
    }
}

impl MotionModel for AugmentedModel<'_> {
    fn derivative(&self, x: &Vector4<f64>, u: &Vector4<f64>) -> Vector4<f64> {
        let nominal = NominalModel.derivative(x, u);
        let vw = Vector3::new(nominal[0], nominal[1], nominal[2]);
        let corr = self.residual.velocity_correction(&vw);
        nominal + self.residual.selector().matrix() * corr
    }

    fn derivative_jacobians(
        &self,
        x: &Vector4<f64>,
        u: &Vector4<f64>,
    ) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
        let (f, mut jx, mut ju) = NominalModel.derivative_jacobians(x, u);
        let vw = Vector3::new(f[0], f[1], f[2]);
        let (corr, dcorr) = self.residual.velocity_correction_with_gradient(&vw);
        let b = self.residual.selector().matrix();
        // correction_k depends on vw_k only; vw = R(α)v.
        let dvw_dx = jx.fixed_view::<3, 4>(0, 0).into_owned();
        let dvw_du = ju.fixed_view::<3, 4>(0, 0).into_owned();
        let dcorr_dx = Matrix3::from_diagonal(&dcorr) * dvw_dx;
        let dcorr_du = Matrix3::from_diagonal(&dcorr) * dvw_du;
        jx += b * dcorr_dx;
        ju += b * dcorr_du;
        (f + b * corr, jx, ju)
    }
}

fn check_finite(x: &State, u: &ControlInput) -> Result<()> {
    if !x.is_finite() || !u.is_finite() {
        return Err(Error::Domain(format!("non-finite input x={x:?} u={u:?}")));
    }
    Ok(())
}

/// Nominal state derivative `[R_yaw(α)·v ; ω]`.
pub fn f_norm(x: &State, u: &ControlInput) -> Result<Vector4<f64>> {
    check_finite(x, u)?;
    Ok(NominalModel.derivative(&x.to_vector(), &u.to_vector()))
}

/// Residual-augmented state derivative.
pub fn f_est(x: &State, u: &ControlInput, model: &ResidualModel) -> Result<Vector4<f64>> {
    check_finite(x, u)?;
    Ok(AugmentedModel::new(model).derivative(&x.to_vector(), &u.to_vector()))
}

/// One classical RK4 step on raw vectors, control held constant.
pub fn rk4_vector<M: MotionModel + ?Sized>(
    model: &M,
    x: &Vector4<f64>,
    u: &Vector4<f64>,
    dt: f64,
) -> Vector4<f64> {
    let k1 = model.derivative(x, u);
    let k2 = model.derivative(&(x + k1 * (0.5 * dt)), u);
    let k3 = model.derivative(&(x + k2 * (0.5 * dt)), u);
    let k4 = model.derivative(&(x + k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 step together with its sensitivities `∂x⁺/∂x` and `∂x⁺/∂u`.
pub fn rk4_with_jacobians<M: MotionModel + ?Sized>(
    model: &M,
    x: &Vector4<f64>,
    u: &Vector4<f64>,
    dt: f64,
) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
    let eye = Matrix4::identity();
    let (k1, f1x, f1u) = model.derivative_jacobians(x, u);
    let (k1x, k1u) = (f1x, f1u);

    let x2 = x + k1 * (0.5 * dt);
    let (k2, f2x, f2u) = model.derivative_jacobians(&x2, u);
    let k2x = f2x * (eye + k1x * (0.5 * dt));
    let k2u = f2x * k1u * (0.5 * dt) + f2u;

    let x3 = x + k2 * (0.5 * dt);
    let (k3, f3x, f3u) = model.derivative_jacobians(&x3, u);
    let k3x = f3x * (eye + k2x * (0.5 * dt));
    let k3u = f3x * k2u * (0.5 * dt) + f3u;

    let x4 = x + k3 * dt;
    let (k4, f4x, f4u) = model.derivative_jacobians(&x4, u);
    let k4x = f4x * (eye + k3x * dt);
    let k4u = f4x * k3u * dt + f4u;

    let h = dt / 6.0;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * h;
    let a = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * h;
    let b = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * h;
    (next, a, b)
}

/// Discrete dynamics `f_d(x, u, dt)`: one RK4 step with yaw renormalized.
pub fn rk4_step<M: MotionModel + ?Sized>(
    model: &M,
    x: &State,
    u: &ControlInput,
    dt: f64,
) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("RK4 step requires dt > 0, got {dt}")));
    }
    check_finite(x, u)?;
    let next = rk4_vector(model, &x.to_vector(), &u.to_vector(), dt);
    let s = State::from_vector(&next);
    if !s.is_finite() {
        return Err(Error::Domain("RK4 produced a non-finite state".into()));
    }
    Ok(s)
}

/// First-order velocity lag with quadratic drag standing in for the real vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Velocity lag time constant, seconds.
    pub tau: f64,
    /// Quadratic drag coefficient, 1/m.
    pub c_d: f64,
    /// Inner integration step, seconds.
    pub dt_sim: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            c_d: 1.0,
            dt_sim: 0.01,
        }
    }
}

impl PlantConfig {
    /// A plant whose response matches the nominal kinematic model.
    pub fn model_matched(dt_sim: f64) -> Self {
        Self {
            tau: dt_sim,
            c_d: 0.0,
            dt_sim,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("plant.tau must be > 0, got {}", self.tau)));
        }
        if !(self.c_d >= 0.0) || !self.c_d.is_finite() {
            return Err(Error::Config(format!("plant.c_d must be >= 0, got {}", self.c_d)));
        }
        if !(self.dt_sim > 0.0) || self.dt_sim > dt * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "plant.dt_sim must be in (0, {dt}], got {}",
                self.dt_sim
            )));
        }
        Ok(())
    }

    fn substeps(&self, dt: f64) -> Result<usize> {
        let n = (dt / self.dt_sim).round();
        if n < 1.0 || (n * self.dt_sim - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Domain(format!(
                "step {dt} is not a multiple of dt_sim {}",
                self.dt_sim
            )));
        }
        Ok(n as usize)
    }
}

/// Advances the true plant by `dt` under a held command.
///
/// `v_true` is the world-frame velocity. The command is tracked through the
/// yaw rotation: `v̇ = (R(α)·v_cmd − v)/τ − c_d·v∘|v|` (component-wise drag),
/// integrated semi-implicitly at `dt_sim`. Yaw follows `ω` exactly.
pub fn plant_step(
    plant: &PlantConfig,
    x_true: &State,
    v_true: &Vector3<f64>,
    u_cmd: &ControlInput,
    dt: f64,
) -> Result<(State, Vector3<f64>)> {
    check_finite(x_true, u_cmd)?;
    let steps = plant.substeps(dt)?;
    let h = plant.dt_sim;
    let mut p = x_true.p;
    let mut v = *v_true;
    let alpha0 = x_true.alpha;
    for k in 0..steps {
        let alpha = alpha0 + u_cmd.omega * (k as f64 * h);
        let target = world_velocity(alpha, &u_cmd.v);
        let drag = v.component_mul(&v.abs()) * plant.c_d;
        v += ((target - v) / plant.tau - drag) * h;
        p += v * h;
    }
    let next = State {
        p,
        alpha: normalize_angle(alpha0 + u_cmd.omega * dt),
    };
    if !next.is_finite() || !v.iter().all(|c| c.is_finite()) {
        return Err(Error::Domain("plant integration diverged".into()));
    }
    Ok((next, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn f_norm_identity_and_quarter_turn() {
        let u = ControlInput::new(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let d = f_norm(&State::at(0.0, 0.0, 0.0, 0.0), &u).unwrap();
        assert_abs_diff_eq!(d, Vector4::new(1.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
        let d = f_norm(&State::at(0.0, 0.0, 0.0, FRAC_PI_2), &u).unwrap();
        assert_abs_diff_eq!(d, Vector4::new(0.0, 1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn f_norm_eighth_turn() {
        let u = ControlInput::new(Vector3::new(1.0, 1.0, 0.0), 0.2);
        let d = f_norm(&State::at(0.0, 0.0, 0.0, PI / 4.0), &u).unwrap();
        assert_abs_diff_eq!(
            d,
            Vector4::new(0.0, 2f64.sqrt(), 0.0, 0.2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn f_norm_rejects_non_finite() {
        let u = ControlInput::new(Vector3::new(f64::NAN, 0.0, 0.0), 0.0);
        assert!(matches!(
            f_norm(&State::at(0.0, 0.0, 0.0, 0.0), &u),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn angle_normalization_range() {
        assert_abs_diff_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normalize_angle(0.1), 0.1);
    }

    #[test]
    fn rk4_constant_derivative_and_pure_rotation() {
        let x = State::at(0.0, 0.0, 0.0, 0.0);
        let u = ControlInput::new(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let n = rk4_step(&NominalModel, &x, &u, 0.1).unwrap();
        assert_eq!(n.p, Vector3::new(0.1, 0.0, 0.0));
        let u = ControlInput::new(Vector3::zeros(), 1.0);
        let n = rk4_step(&NominalModel, &x, &u, 0.1).unwrap();
        assert_abs_diff_eq!(n.alpha, 0.1, epsilon = 1e-15);
        assert_eq!(n.p, Vector3::zeros());
    }

    #[test]
    fn rk4_jacobian_matches_finite_differences() {
        let x = Vector4::new(0.3, -0.2, 1.0, 0.7);
        let u = Vector4::new(0.8, -0.4, 0.3, 0.9);
        let (_, a, b) = rk4_with_jacobians(&NominalModel, &x, &u, 0.1);
        let h = 1e-6;
        for j in 0..4 {
            let mut e = Vector4::zeros();
            e[j] = h;
            let da = (rk4_vector(&NominalModel, &(x + e), &u, 0.1)
                - rk4_vector(&NominalModel, &(x - e), &u, 0.1))
                / (2.0 * h);
            let db = (rk4_vector(&NominalModel, &x, &(u + e), 0.1)
                - rk4_vector(&NominalModel, &x, &(u - e), 0.1))
                / (2.0 * h);
            assert_abs_diff_eq!(a.column(j).into_owned(), da, epsilon = 1e-8);
            assert_abs_diff_eq!(b.column(j).into_owned(), db, epsilon = 1e-8);
        }
    }

    #[test]
    fn plant_equilibrium_is_static() {
        let plant = PlantConfig {
            tau: 0.3,
            c_d: 0.1,
            dt_sim: 0.01,
        };
        let x = State::at(1.0, 2.0, 3.0, 0.4);
        let (n, v) = plant_step(&plant, &x, &Vector3::zeros(), &ControlInput::zero(), 0.1).unwrap();
        assert_eq!(n, x);
        assert_eq!(v, Vector3::zeros());
    }

    #[test]
    fn plant_fast_lag_tracks_command() {
        let plant = PlantConfig::model_matched(0.01);
        let u = ControlInput::new(Vector3::new(1.0, -0.5, 0.2), 0.0);
        let mut x = State::at(0.0, 0.0, 0.0, 0.0);
        let mut v = Vector3::zeros();
        for _ in 0..5 {
            (x, v) = plant_step(&plant, &x, &v, &u, 0.1).unwrap();
        }
        assert!((v - u.v).norm() <= 0.01 * u.v.norm());
    }

    #[test]
    fn plant_rejects_non_multiple_step() {
        let plant = PlantConfig {
            tau: 0.3,
            c_d: 0.0,
            dt_sim: 0.03,
        };
        let r = plant_step(
            &plant,
            &State::at(0.0, 0.0, 0.0, 0.0),
            &Vector3::zeros(),
            &ControlInput::zero(),
            0.1,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn plant_drag_steady_state_matches_root() {
        let plant = PlantConfig {
            tau: 0.3,
            c_d: 0.1,
            dt_sim: 0.01,
        };
        // Root of 0.03 v² + v − 1 = 0 by bisection.
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (1.0 - mid) / 0.3 - 0.1 * mid * mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let u = ControlInput::new(Vector3::new(1.0, 0.0, 0.0), 0.0);
        let mut x = State::at(0.0, 0.0, 0.0, 0.0);
        let mut v = Vector3::zeros();
        for step in 1..=50 {
            (x, v) = plant_step(&plant, &x, &v, &u, 0.1).unwrap();
            if step == 10 {
                assert!((v.x - root).abs() < 0.05 * root, "after 1 s: {} vs {root}", v.x);
            }
        }
        assert_abs_diff_eq!(v.x, root, epsilon = 1e-6);
        assert!(x.p.x > 0.0);
    }
}
