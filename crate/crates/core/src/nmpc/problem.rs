//! Multiple-shooting transcription: decision-vector layout, tracking cost,
//! shooting defects and obstacle constraints.
//!
//! The decision vector is `w = [u_0 … u_{N-1}, x_0 … x_N]`, four entries per
//! control and per state.

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{normalize_angle, rk4_vector, rk4_with_jacobians, ControlInput, MotionModel, State};
use crate::error::{Error, Result};

/// Smoothing added under the square root of obstacle distances.
pub const DISTANCE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vector3<f64>,
}

impl Obstacle {
    pub fn new(center: Vector3<f64>) -> Result<Self> {
        if !center.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite obstacle center {center:?}")));
        }
        Ok(Self { center })
    }

    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self {
            center: Vector3::new(x, y, z),
        }
    }

    /// Smoothed distance from `p` to the obstacle.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        ((p - self.center).norm_squared() + DISTANCE_EPS).sqrt()
    }
}

/// Reference states `x_ref[0..=N]` and controls `u_ref[0..N]` over one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSlice {
    pub states: Vec<State>,
    pub controls: Vec<ControlInput>,
}

impl ReferenceSlice {
    pub fn new(states: Vec<State>, controls: Vec<ControlInput>) -> Result<Self> {
        if states.len() != controls.len() + 1 || controls.is_empty() {
            return Err(Error::Dimension(format!(
                "reference slice needs N+1 states and N >= 1 controls, got {} and {}",
                states.len(),
                controls.len()
            )));
        }
        Ok(Self { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Index helpers for the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
}

impl Layout {
    pub fn new(horizon: usize) -> Self {
        Self { horizon }
    }

    pub fn len(&self) -> usize {
        4 * self.horizon + 4 * (self.horizon + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn u(&self, i: usize) -> usize {
        4 * i
    }

    pub fn x(&self, i: usize) -> usize {
        4 * self.horizon + 4 * i
    }

    pub fn control(&self, w: &DVector<f64>, i: usize) -> Vector4<f64> {
        w.fixed_rows::<4>(self.u(i)).into_owned()
    }

    pub fn state(&self, w: &DVector<f64>, i: usize) -> Vector4<f64> {
        w.fixed_rows::<4>(self.x(i)).into_owned()
    }

    pub fn pack(&self, controls: &[ControlInput], states: &[State]) -> Result<DVector<f64>> {
        if controls.len() != self.horizon || states.len() != self.horizon + 1 {
            return Err(Error::Dimension(format!(
                "expected {} controls and {} states, got {} and {}",
                self.horizon,
                self.horizon + 1,
                controls.len(),
                states.len()
            )));
        }
        let mut w = DVector::zeros(self.len());
        for (i, u) in controls.iter().enumerate() {
            w.fixed_rows_mut::<4>(self.u(i)).copy_from(&u.to_vector());
        }
        for (i, x) in states.iter().enumerate() {
            w.fixed_rows_mut::<4>(self.x(i)).copy_from(&x.to_vector());
        }
        Ok(w)
    }

    pub fn controls(&self, w: &DVector<f64>) -> Vec<ControlInput> {
        (0..self.horizon)
            .map(|i| ControlInput::from_vector(&self.control(w, i)))
            .collect()
    }

    pub fn states(&self, w: &DVector<f64>) -> Vec<State> {
        (0..=self.horizon)
            .map(|i| State::from_vector(&self.state(w, i)))
            .collect()
    }

    fn check(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::Dimension(format!(
                "decision vector has length {}, expected {}",
                w.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// State difference with the yaw component wrapped to `(-π, π]`.
pub fn state_error(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let mut e = a - b;
    e[3] = normalize_angle(e[3]);
    e
}

/// Tracking cost `Σ‖x̄ᵢ − x_ref,ᵢ‖²_Q + Σ‖ūᵢ − u_ref,ᵢ‖²_R` and its gradient.
pub fn build_cost(
    reference: &ReferenceSlice,
    w: &DVector<f64>,
    q: &Vector4<f64>,
    r: &Vector4<f64>,
) -> Result<(f64, DVector<f64>)> {
    let layout = Layout::new(reference.horizon());
    layout.check(w)?;
    let mut cost = 0.0;
    let mut grad = DVector::zeros(layout.len());
    for (i, xr) in reference.states.iter().enumerate() {
        let e = state_error(&layout.state(w, i), &xr.to_vector());
        let qe = q.component_mul(&e);
        cost += e.dot(&qe);
        grad.fixed_rows_mut::<4>(layout.x(i)).copy_from(&(qe * 2.0));
    }
    for (i, ur) in reference.controls.iter().enumerate() {
        let e = layout.control(w, i) - ur.to_vector();
        let re = r.component_mul(&e);
        cost += e.dot(&re);
        grad.fixed_rows_mut::<4>(layout.u(i)).copy_from(&(re * 2.0));
    }
    Ok((cost, grad))
}

/// Shooting defects `g1`: block 0 is `x_current − x̄_0`, block `i` is
/// `f_d(x̄_{i-1}, ū_{i-1}) − x̄_i`; yaw components wrapped.
pub fn shooting_defects<M: MotionModel + ?Sized>(
    w: &DVector<f64>,
    horizon: usize,
    x_current: &State,
    model: &M,
    dt: f64,
) -> Result<DVector<f64>> {
    let layout = Layout::new(horizon);
    layout.check(w)?;
    let mut g = DVector::zeros(4 * (horizon + 1));
    g.fixed_rows_mut::<4>(0)
        .copy_from(&state_error(&x_current.to_vector(), &layout.state(w, 0)));
    for i in 0..horizon {
        let next = rk4_vector(model, &layout.state(w, i), &layout.control(w, i), dt);
        g.fixed_rows_mut::<4>(4 * (i + 1))
            .copy_from(&state_error(&next, &layout.state(w, i + 1)));
    }
    Ok(g)
}

/// Jacobian of [`shooting_defects`] with respect to `w`.
pub fn shooting_jacobian<M: MotionModel + ?Sized>(
    w: &DVector<f64>,
    horizon: usize,
    model: &M,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let layout = Layout::new(horizon);
    layout.check(w)?;
    let mut jac = DMatrix::zeros(4 * (horizon + 1), layout.len());
    for k in 0..4 {
        jac[(k, layout.x(0) + k)] = -1.0;
    }
    for i in 0..horizon {
        let (_, a, b) = rk4_with_jacobians(model, &layout.state(w, i), &layout.control(w, i), dt);
        let row = 4 * (i + 1);
        jac.view_mut((row, layout.x(i)), (4, 4)).copy_from(&a);
        jac.view_mut((row, layout.u(i)), (4, 4)).copy_from(&b);
        for k in 0..4 {
            jac[(row + k, layout.x(i + 1) + k)] = -1.0;
        }
    }
    Ok(jac)
}

/// Obstacle constraints `g2 = d_o − ‖c − p̄ᵢ‖` over every (obstacle, state)
/// pair, obstacle-major. Entries `≤ 0` are satisfied.
pub fn obstacle_constraints(w: &DVector<f64>, horizon: usize, obstacles: &[Obstacle], d_o: f64) -> Result<DVector<f64>> {
    let layout = Layout::new(horizon);
    layout.check(w)?;
    let mut g = DVector::zeros(obstacles.len() * (horizon + 1));
    for (o, obs) in obstacles.iter().enumerate() {
        for i in 0..=horizon {
            let p = layout.state(w, i).fixed_rows::<3>(0).into_owned();
            g[o * (horizon + 1) + i] = d_o - obs.distance(&p);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NominalModel;

    fn straight_reference(n: usize) -> ReferenceSlice {
        let states = (0..=n).map(|i| State::at(0.1 * i as f64, 0.0, 1.0, 0.0)).collect();
        let controls = vec![ControlInput::new(Vector3::new(1.0, 0.0, 0.0), 0.0); n];
        ReferenceSlice::new(states, controls).unwrap()
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let r = straight_reference(5);
        let layout = Layout::new(5);
        let w = layout.pack(&r.controls, &r.states).unwrap();
        let (c, g) = build_cost(&r, &w, &Vector4::repeat(3.0), &Vector4::repeat(0.5)).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn single_deviation_cost() {
        let r = straight_reference(4);
        let layout = Layout::new(4);
        let mut w = layout.pack(&r.controls, &r.states).unwrap();
        w[layout.x(2)] += 1.0;
        let q = Vector4::new(10.0, 1.0, 1.0, 1.0);
        let (c, _) = build_cost(&r, &w, &q, &Vector4::repeat(1.0)).unwrap();
        assert!((c - 10.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_error_is_wrapped() {
        let mut r = straight_reference(1);
        r.states[0].alpha = 3.1;
        let layout = Layout::new(1);
        let mut w = layout.pack(&r.controls, &r.states).unwrap();
        w[layout.x(0) + 3] = -3.1;
        let (c, _) = build_cost(&r, &w, &Vector4::repeat(1.0), &Vector4::repeat(1.0)).unwrap();
        let wrapped = 2.0 * std::f64::consts::PI - 6.2;
        assert!((c - wrapped * wrapped).abs() < 1e-12);
    }

    #[test]
    fn rollout_has_zero_defects_and_perturbation_is_local() {
        let n = 6;
        let layout = Layout::new(n);
        let x0 = State::at(0.5, -1.0, 2.0, 0.3);
        let controls: Vec<ControlInput> = (0..n)
            .map(|i| ControlInput::new(Vector3::new(1.0, 0.2 * i as f64, -0.1), 0.4))
            .collect();
        let mut states = vec![x0];
        for u in &controls {
            let next = crate::dynamics::rk4_step(&NominalModel, states.last().unwrap(), u, 0.1).unwrap();
            states.push(next);
        }
        let mut w = layout.pack(&controls, &states).unwrap();
        let g = shooting_defects(&w, n, &x0, &NominalModel, 0.1).unwrap();
        assert!(g.amax() < 1e-12);

        w[layout.x(3) + 1] += 1e-3;
        let g = shooting_defects(&w, n, &x0, &NominalModel, 0.1).unwrap();
        let changed: Vec<usize> = (0..=n).filter(|b| g.fixed_rows::<4>(4 * b).amax() > 1e-9).collect();
        assert_eq!(changed, vec![3, 4]);
    }

    #[test]
    fn obstacle_sign_convention() {
        let layout = Layout::new(1);
        let states = vec![State::at(0.0, 0.0, 0.0, 0.0), State::at(0.5, 0.0, 0.0, 0.0)];
        let w = layout.pack(&[ControlInput::zero()], &states).unwrap();
        assert!(obstacle_constraints(&w, 1, &[], 1.0).unwrap().is_empty());
        let g = obstacle_constraints(&w, 1, &[Obstacle::at(1.0, 0.0, 0.0)], 1.0).unwrap();
        assert!(g[0].abs() < 1e-8);
        assert!((g[1] - 0.5).abs() < 1e-8);
    }
}
