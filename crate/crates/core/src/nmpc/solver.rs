//! SQP with a Gauss-Newton Hessian for the multiple-shooting NMPC problem.
//!
//! Each iteration linearizes the shooting defects and obstacle constraints,
//! eliminates the state steps through the linearized dynamics and solves
//! the resulting dense QP in the control steps. An L1 merit function with a
//! rollout-based second-order correction globalizes the iteration.

use std::io::Write;
use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::problem::{
    build_cost, obstacle_constraints, shooting_defects, state_error, Layout, Obstacle, ReferenceSlice,
};
use super::qp::{solve_qp, InequalityBuilder, QpSolution};
use crate::dynamics::{
    rk4_vector, rk4_with_jacobians, world_velocity, AugmentedModel, ControlInput, MotionModel, NominalModel, State,
};
use crate::error::{Error, Result};
use crate::residual::ResidualModel;

/// Obstacle-slack penalty used when the hard-constrained QP is infeasible.
pub const SLACK_PENALTY: f64 = 1e4;
const SLACK_REGULARIZATION: f64 = 1e-4;
const DEFECT_TOL: f64 = 1e-6;
const OBSTACLE_TOL: f64 = 1e-4;
const QP_TOL: f64 = 1e-10;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1.0 / 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcConfig {
    /// Horizon length `N` in steps.
    #[serde(alias = "N")]
    pub horizon: usize,
    /// Shooting interval in seconds.
    pub dt: f64,
    /// State weights `[px, py, pz, yaw]`.
    pub q: [f64; 4],
    /// Control weights `[vx, vy, vz, yaw_rate]`.
    pub r: [f64; 4],
    pub v_max: f64,
    pub omega_max: f64,
    /// State box; the yaw entries are ignored since yaw lives on the circle.
    pub x_min: [f64; 4],
    pub x_max: [f64; 4],
    /// Obstacle safe distance in meters.
    pub d_o: f64,
    pub max_sqp_iters: usize,
    pub kkt_tol: f64,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            dt: 0.1,
            q: [10.0, 10.0, 10.0, 1.0],
            r: [0.5, 0.5, 0.5, 0.1],
            v_max: 2.0,
            omega_max: 1.5,
            x_min: [-100.0, -100.0, -100.0, -std::f64::consts::PI],
            x_max: [100.0, 100.0, 100.0, std::f64::consts::PI],
            d_o: 1.0,
            max_sqp_iters: 50,
            kkt_tol: 1e-4,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon == 0 {
            return bad("nmpc.horizon must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("nmpc.dt must be positive, got {}", self.dt));
        }
        if self.q.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("nmpc.q entries must be >= 0, got {:?}", self.q));
        }
        if self.r.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("nmpc.r entries must be > 0, got {:?}", self.r));
        }
        if !(self.v_max >= 0.0 && self.v_max.is_finite()) {
            return bad(format!("nmpc.v_max must be >= 0, got {}", self.v_max));
        }
        if !(self.omega_max >= 0.0 && self.omega_max.is_finite()) {
            return bad(format!("nmpc.omega_max must be >= 0, got {}", self.omega_max));
        }
        if !(self.d_o > 0.0 && self.d_o.is_finite()) {
            return bad(format!("nmpc.d_o must be positive, got {}", self.d_o));
        }
        for k in 0..3 {
            if !(self.x_min[k] <= self.x_max[k]) {
                return bad(format!("nmpc.x_min[{k}] exceeds nmpc.x_max[{k}]"));
            }
        }
        if self.max_sqp_iters == 0 {
            return bad("nmpc.max_sqp_iters must be >= 1".into());
        }
        if !(self.kkt_tol > 0.0) {
            return bad("nmpc.kkt_tol must be positive".into());
        }
        Ok(())
    }

    fn control_bounds(&self) -> (Vector4<f64>, Vector4<f64>) {
        let hi = Vector4::new(self.v_max, self.v_max, self.v_max, self.omega_max);
        (-hi, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIters,
    InfeasibleQp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmpcSolution {
    pub controls: Vec<ControlInput>,
    pub states: Vec<State>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub sqp_iters: usize,
    pub status: SolveStatus,
    /// Wall-clock solve time in seconds.
    pub solve_time: f64,
    /// `‖g1‖∞` at the returned iterate.
    pub max_defect: f64,
    /// Largest obstacle-constraint value over states 1..N (≤ 0 when satisfied).
    pub max_obstacle_violation: f64,
    /// Sum of obstacle slacks used by the last QP (zero unless the elastic QP was needed).
    pub slack_total: f64,
    /// Predictive variance of the residual velocity correction along the horizon.
    pub predicted_variance: Vec<[f64; 3]>,
}

impl NmpcSolution {
    /// Decision vector `[ū…, x̄…]`.
    pub fn decision_vector(&self) -> DVector<f64> {
        Layout::new(self.controls.len())
            .pack(&self.controls, &self.states)
            .expect("consistent solution")
    }

    /// First control of the plan.
    pub fn first_control(&self) -> ControlInput {
        self.controls[0]
    }
}

#[derive(Serialize)]
struct IterationRecord {
    iteration: usize,
    cost: f64,
    merit_before: f64,
    merit: f64,
    kkt_residual: f64,
    step_length: f64,
    max_defect: f64,
    max_obstacle: f64,
    elastic: bool,
    qp_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
enum Row {
    Control,
    State { i: usize, k: usize, sign: f64 },
    Obstacle { i: usize, normal: Vector3<f64> },
}

struct Linearization {
    a: Vec<Matrix4<f64>>,
    b: Vec<Matrix4<f64>>,
    /// `Γ`, mapping control steps to state steps (4(N+1) × 4N).
    gamma_mat: DMatrix<f64>,
    /// State steps with zero control step.
    gamma: DVector<f64>,
}

fn clamp_controls(w: &mut DVector<f64>, layout: &Layout, lo: &Vector4<f64>, hi: &Vector4<f64>) {
    for i in 0..layout.horizon {
        for k in 0..4 {
            let idx = layout.u(i) + k;
            w[idx] = w[idx].clamp(lo[k], hi[k]);
        }
    }
}

fn normalize_yaws(w: &mut DVector<f64>, layout: &Layout) {
    for i in 0..=layout.horizon {
        let idx = layout.x(i) + 3;
        w[idx] = crate::dynamics::normalize_angle(w[idx]);
    }
}

fn rollout(w: &mut DVector<f64>, layout: &Layout, x_cur: &State, model: &dyn MotionModel, dt: f64) {
    w.fixed_rows_mut::<4>(layout.x(0)).copy_from(&x_cur.to_vector());
    for i in 0..layout.horizon {
        let next = rk4_vector(model, &layout.state(w, i), &layout.control(w, i), dt);
        w.fixed_rows_mut::<4>(layout.x(i + 1)).copy_from(&next);
    }
    normalize_yaws(w, layout);
}

struct Problem<'a> {
    cfg: &'a NmpcConfig,
    layout: Layout,
    x_cur: State,
    reference: &'a ReferenceSlice,
    obstacles: &'a [Obstacle],
    model: &'a dyn MotionModel,
    q: Vector4<f64>,
    r: Vector4<f64>,
    lo: Vector4<f64>,
    hi: Vector4<f64>,
}

impl Problem<'_> {
    fn cost(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        build_cost(self.reference, w, &self.q, &self.r).expect("consistent dimensions")
    }

    fn defects(&self, w: &DVector<f64>) -> DVector<f64> {
        shooting_defects(w, self.layout.horizon, &self.x_cur, self.model, self.cfg.dt).expect("consistent dimensions")
    }

    /// Sum of positive obstacle violations over states 1..N, and the max entry.
    fn obstacle_violation(&self, w: &DVector<f64>) -> (f64, f64) {
        let n = self.layout.horizon;
        let g = obstacle_constraints(w, n, self.obstacles, self.cfg.d_o).expect("consistent dimensions");
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        for o in 0..self.obstacles.len() {
            for i in 1..=n {
                let v = g[o * (n + 1) + i];
                sum += v.max(0.0);
                max = max.max(v);
            }
        }
        (sum, max)
    }

    fn merit(&self, w: &DVector<f64>, mu1: f64, mu2: f64) -> f64 {
        let (j, _) = self.cost(w);
        j + mu1 * self.defects(w).lp_norm(1) + mu2 * self.obstacle_violation(w).0
    }

    fn linearize(&self, w: &DVector<f64>, defects: &DVector<f64>) -> Linearization {
        let n = self.layout.horizon;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let (_, ai, bi) = rk4_with_jacobians(self.model, &self.layout.state(w, i), &self.layout.control(w, i), self.cfg.dt);
            a.push(ai);
            b.push(bi);
        }
        let mut gamma = DVector::zeros(4 * (n + 1));
        gamma.fixed_rows_mut::<4>(0).copy_from(&defects.fixed_rows::<4>(0));
        for i in 0..n {
            let next = a[i] * gamma.fixed_rows::<4>(4 * i) + defects.fixed_rows::<4>(4 * (i + 1));
            gamma.fixed_rows_mut::<4>(4 * (i + 1)).copy_from(&next);
        }
        let mut gamma_mat = DMatrix::zeros(4 * (n + 1), 4 * n);
        for j in 0..n {
            gamma_mat.view_mut((4 * (j + 1), 4 * j), (4, 4)).copy_from(&b[j]);
            for i in (j + 1)..n {
                let prev = gamma_mat.view((4 * i, 4 * j), (4, 4)).into_owned();
                gamma_mat.view_mut((4 * (i + 1), 4 * j), (4, 4)).copy_from(&(a[i] * prev));
            }
        }
        Linearization {
            a,
            b,
            gamma_mat,
            gamma,
        }
    }

    /// Builds and solves the condensed QP. Returns the control step, the
    /// state step, the QP solution, the row kinds and whether slacks were used.
    fn qp_step(
        &self,
        w: &DVector<f64>,
        lin: &Linearization,
    ) -> Option<(DVector<f64>, DVector<f64>, QpSolution, Vec<Row>, bool, f64)> {
        let n = self.layout.horizon;
        let nu = 4 * n;
        let gm = &lin.gamma_mat;

        // Objective in the control step.
        let mut qdiag = DVector::zeros(4 * (n + 1));
        let mut ex = DVector::zeros(4 * (n + 1));
        for i in 0..=n {
            let e = state_error(&self.layout.state(w, i), &self.reference.states[i].to_vector());
            ex.fixed_rows_mut::<4>(4 * i).copy_from(&(e + lin.gamma.fixed_rows::<4>(4 * i)));
            qdiag.fixed_rows_mut::<4>(4 * i).copy_from(&self.q);
        }
        let mut h = gm.transpose() * DMatrix::from_diagonal(&qdiag) * gm;
        let mut g = gm.transpose() * qdiag.component_mul(&ex);
        for i in 0..n {
            let eu = self.layout.control(w, i) - self.reference.controls[i].to_vector();
            for k in 0..4 {
                h[(4 * i + k, 4 * i + k)] += self.r[k];
                g[4 * i + k] += self.r[k] * eu[k];
            }
        }
        h *= 2.0;
        g *= 2.0;

        let mut rows = Vec::new();
        let mut cons = InequalityBuilder::new(nu);
        for i in 0..n {
            let u = self.layout.control(w, i);
            for k in 0..4 {
                cons.lower_bound(4 * i + k, self.lo[k] - u[k]);
                rows.push(Row::Control);
                cons.upper_bound(4 * i + k, self.hi[k] - u[k]);
                rows.push(Row::Control);
            }
        }
        for i in 1..=n {
            let xi = self.layout.state(w, i);
            for k in 0..3 {
                let base = xi[k] + lin.gamma[4 * i + k];
                let grow = gm.row(4 * i + k);
                if self.cfg.x_min[k].is_finite() {
                    let row: Vec<f64> = grow.iter().copied().collect();
                    cons.push(&row, self.cfg.x_min[k] - base);
                    rows.push(Row::State { i, k, sign: 1.0 });
                }
                if self.cfg.x_max[k].is_finite() {
                    let row: Vec<f64> = grow.iter().map(|v| -v).collect();
                    cons.push(&row, base - self.cfg.x_max[k]);
                    rows.push(Row::State { i, k, sign: -1.0 });
                }
            }
        }
        let reach = self.cfg.v_max * self.cfg.dt * n as f64 + 1.0;
        let mut obstacle_rows = Vec::new();
        for obs in self.obstacles {
            for i in 1..=n {
                let p = self.layout.state(w, i).fixed_rows::<3>(0).into_owned();
                let dist = obs.distance(&p);
                if dist > self.cfg.d_o + reach {
                    continue;
                }
                let normal = (p - obs.center) / dist;
                let gp = gm.view((4 * i, 0), (3, nu));
                let row: Vec<f64> = (0..nu).map(|c| normal.dot(&gp.column(c).into_owned())).collect();
                let gam = lin.gamma.fixed_rows::<3>(4 * i).into_owned();
                obstacle_rows.push(cons.len());
                cons.push(&row, self.cfg.d_o - dist - normal.dot(&gam));
                rows.push(Row::Obstacle { i, normal });
            }
        }
        let cons = cons.build();

        let (du, qp, elastic, slack_total) = match solve_qp(&h, &g, &cons, QP_TOL) {
            Ok(sol) => (sol.x.clone(), sol, false, 0.0),
            Err(_) if !obstacle_rows.is_empty() => {
                let ns = obstacle_rows.len();
                let nt = nu + ns;
                let mut he = DMatrix::zeros(nt, nt);
                he.view_mut((0, 0), (nu, nu)).copy_from(&h);
                let mut ge = DVector::zeros(nt);
                ge.rows_mut(0, nu).copy_from(&g);
                for s in 0..ns {
                    he[(nu + s, nu + s)] = SLACK_REGULARIZATION;
                    ge[nu + s] = SLACK_PENALTY;
                }
                let mut ce = InequalityBuilder::new(nt);
                let mut slack_of = vec![None; cons.len()];
                for (s, &r) in obstacle_rows.iter().enumerate() {
                    slack_of[r] = Some(s);
                }
                let mut row = vec![0.0; nt];
                for r in 0..cons.len() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..nu {
                        row[c] = cons.rows[(r, c)];
                    }
                    if let Some(s) = slack_of[r] {
                        row[nu + s] = 1.0;
                    }
                    ce.push(&row, cons.rhs[r]);
                }
                for s in 0..ns {
                    ce.lower_bound(nu + s, 0.0);
                }
                let sol = solve_qp(&he, &ge, &ce.build(), QP_TOL).ok()?;
                let du = sol.x.rows(0, nu).into_owned();
                let slack_total = sol.x.rows(nu, ns).sum();
                let mut mult = DVector::zeros(cons.len());
                for r in 0..cons.len() {
                    mult[r] = sol.multipliers[r];
                }
                let qp = QpSolution {
                    x: du.clone(),
                    multipliers: mult,
                    objective: sol.objective,
                    iterations: sol.iterations,
                    active: sol.active.clone(),
                };
                (du, qp, true, slack_total)
            }
            Err(_) => return None,
        };
        let dx = gm * &du + &lin.gamma;
        Some((du, dx, qp, rows, elastic, slack_total))
    }

    /// Equality multipliers from the backward recursion of the QP stationarity conditions.
    fn defect_multipliers(&self, w: &DVector<f64>, dx: &DVector<f64>, lin: &Linearization, qp: &QpSolution, rows: &[Row]) -> f64 {
        let n = self.layout.horizon;
        let mut r: Vec<Vector4<f64>> = (0..=n)
            .map(|i| {
                let e = state_error(&self.layout.state(w, i), &self.reference.states[i].to_vector());
                self.q.component_mul(&(e + dx.fixed_rows::<4>(4 * i))) * 2.0
            })
            .collect();
        for (idx, row) in rows.iter().enumerate() {
            let nu = qp.multipliers[idx];
            if nu == 0.0 {
                continue;
            }
            match *row {
                Row::Control => {}
                Row::State { i, k, sign } => r[i][k] -= nu * sign,
                Row::Obstacle { i, normal } => {
                    for k in 0..3 {
                        r[i][k] -= nu * normal[k];
                    }
                }
            }
        }
        let mut lambda = r[n];
        let mut norm = lambda.amax();
        for i in (0..n).rev() {
            lambda = r[i] + lin.a[i].transpose() * lambda;
            norm = norm.max(lambda.amax());
        }
        let _ = &lin.b;
        norm
    }
}

fn initial_guess(
    cfg: &NmpcConfig,
    layout: &Layout,
    x_cur: &State,
    reference: &ReferenceSlice,
    guess: Option<&NmpcSolution>,
    model: &dyn MotionModel,
) -> DVector<f64> {
    let (lo, hi) = cfg.control_bounds();
    match guess {
        Some(sol) if sol.controls.len() == layout.horizon => {
            let mut w = sol.decision_vector();
            w.fixed_rows_mut::<4>(layout.x(0)).copy_from(&x_cur.to_vector());
            clamp_controls(&mut w, layout, &lo, &hi);
            w
        }
        _ => {
            let mut w = layout
                .pack(&reference.controls, &reference.states)
                .expect("reference matches horizon");
            clamp_controls(&mut w, layout, &lo, &hi);
            rollout(&mut w, layout, x_cur, model, cfg.dt);
            w
        }
    }
}

/// Shifts a previous plan by one step, repeating the last control.
pub fn shift_solution(prev: &NmpcSolution, model: Option<&ResidualModel>, dt: f64) -> NmpcSolution {
    let mut out = prev.clone();
    let n = prev.controls.len();
    if n == 0 {
        return out;
    }
    out.controls.rotate_left(1);
    out.controls[n - 1] = prev.controls[n - 1];
    out.states.rotate_left(1);
    let last = prev.states[n];
    let next = match model {
        Some(res) => rk4_vector(&AugmentedModel::new(res), &last.to_vector(), &prev.controls[n - 1].to_vector(), dt),
        None => rk4_vector(&NominalModel, &last.to_vector(), &prev.controls[n - 1].to_vector(), dt),
    };
    out.states[n] = State::from_vector(&next);
    out
}

fn check_inputs(cfg: &NmpcConfig, x_cur: &State, reference: &ReferenceSlice) -> Result<()> {
    cfg.validate()?;
    if !x_cur.is_finite() {
        return Err(Error::Domain(format!("non-finite current state {x_cur:?}")));
    }
    if reference.horizon() != cfg.horizon {
        return Err(Error::Dimension(format!(
            "reference covers {} steps but the horizon is {}",
            reference.horizon(),
            cfg.horizon
        )));
    }
    if reference.states.iter().any(|s| !s.is_finite()) || reference.controls.iter().any(|u| !u.is_finite()) {
        return Err(Error::Domain("non-finite reference".into()));
    }
    Ok(())
}

/// Solves one NMPC problem starting from `guess` as given (no shifting).
pub fn solve_with_guess(
    cfg: &NmpcConfig,
    x_cur: &State,
    reference: &ReferenceSlice,
    obstacles: &[Obstacle],
    guess: Option<&NmpcSolution>,
    model: Option<&ResidualModel>,
    mut diagnostics: Option<&mut dyn Write>,
) -> Result<NmpcSolution> {
    let start = Instant::now();
    check_inputs(cfg, x_cur, reference)?;
    let augmented = model.map(AugmentedModel::new);
    let dyn_model: &dyn MotionModel = match &augmented {
        Some(m) => m,
        None => &NominalModel,
    };
    let layout = Layout::new(cfg.horizon);
    let (lo, hi) = cfg.control_bounds();
    let prob = Problem {
        cfg,
        layout,
        x_cur: *x_cur,
        reference,
        obstacles,
        model: dyn_model,
        q: Vector4::from(cfg.q),
        r: Vector4::from(cfg.r),
        lo,
        hi,
    };

    let mut w = initial_guess(cfg, &layout, x_cur, reference, guess, dyn_model);
    let mut mu1 = 0.0f64;
    let mut mu2 = 0.0f64;
    let mut status = SolveStatus::MaxIters;
    let mut iters = 0;
    let mut kkt = f64::INFINITY;
    let mut slack_total = 0.0;
    let mut prev_elastic = false;

    for it in 0..cfg.max_sqp_iters {
        iters = it + 1;
        let defects = prob.defects(&w);
        let lin = prob.linearize(&w, &defects);
        let Some((du, dx, qp, rows, elastic, slacks)) = prob.qp_step(&w, &lin) else {
            status = SolveStatus::InfeasibleQp;
            break;
        };
        slack_total = slacks;
        let mut d = DVector::zeros(layout.len());
        d.rows_mut(0, 4 * cfg.horizon).copy_from(&du);
        d.rows_mut(layout.x(0), 4 * (cfg.horizon + 1)).copy_from(&dx);
        let step_norm = d.amax();

        let lambda_norm = prob.defect_multipliers(&w, &dx, &lin, &qp, &rows);
        let nu_norm = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, Row::Obstacle { .. }))
            .map(|(i, _)| qp.multipliers[i])
            .fold(0.0, f64::max);
        // Penalties track the current multipliers and may relax again once
        // the early, poorly scaled iterates are left behind.
        let need1 = 1.2 * lambda_norm + 1e-6;
        let need2 = 1.2 * nu_norm + 1e-6;
        if prev_elastic {
            mu1 = need1;
            mu2 = need2;
        } else {
            mu1 = need1.max(0.5 * (mu1 + need1));
            mu2 = need2.max(0.5 * (mu2 + need2));
        }
        prev_elastic = elastic;

        let (j0, grad) = prob.cost(&w);
        let (viol_sum, _) = prob.obstacle_violation(&w);
        let phi0 = j0 + mu1 * defects.lp_norm(1) + mu2 * viol_sum;
        let slope = grad.dot(&d) - mu1 * defects.lp_norm(1) - mu2 * (viol_sum - slacks).max(0.0);

        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        while alpha >= MIN_STEP {
            let bound = phi0 + ARMIJO * alpha * slope.min(0.0);
            let mut trial = &w + &d * alpha;
            clamp_controls(&mut trial, &layout, &lo, &hi);
            normalize_yaws(&mut trial, &layout);
            let phi = prob.merit(&trial, mu1, mu2);
            if phi <= bound {
                accepted = Some((trial, phi));
                break;
            }
            // Second-order correction: keep the control step, re-simulate the states.
            rollout(&mut trial, &layout, x_cur, dyn_model, cfg.dt);
            let phi = prob.merit(&trial, mu1, mu2);
            if phi <= bound {
                accepted = Some((trial, phi));
                break;
            }
            alpha *= 0.5;
        }

        let accepted_step = accepted.is_some();
        let (merit_new, step_len) = match accepted {
            Some((trial, phi)) => {
                w = trial;
                (phi, alpha)
            }
            None => (phi0, 0.0),
        };
        let new_defects = prob.defects(&w);
        let (_, max_obs) = prob.obstacle_violation(&w);
        let max_def = new_defects.amax();
        kkt = step_norm.max(max_def).max(max_obs.max(0.0));

        if let Some(sink) = diagnostics.as_deref_mut() {
            let rec = IterationRecord {
                iteration: iters,
                cost: prob.cost(&w).0,
                merit_before: phi0,
                merit: merit_new,
                kkt_residual: kkt,
                step_length: step_len,
                max_defect: max_def,
                max_obstacle: if obstacles.is_empty() { 0.0 } else { max_obs },
                elastic,
                qp_iterations: qp.iterations,
            };
            serde_json::to_writer(&mut *sink, &rec)?;
            sink.write_all(b"\n")?;
        }

        let feasible = max_def <= DEFECT_TOL && (obstacles.is_empty() || max_obs <= OBSTACLE_TOL);
        if step_norm <= cfg.kkt_tol && feasible {
            status = SolveStatus::Converged;
            break;
        }
        if !accepted_step {
            debug!("NMPC line search stalled at iteration {iters}");
            break;
        }
    }

    let controls = layout.controls(&w);
    let states = layout.states(&w);
    let (cost, _) = prob.cost(&w);
    let max_defect = prob.defects(&w).amax();
    let (_, max_obs) = prob.obstacle_violation(&w);
    let predicted_variance = match model {
        Some(res) if !res.is_zero() => (0..cfg.horizon)
            .map(|i| {
                let vw = world_velocity(states[i].alpha, &controls[i].v);
                let v = res.correction_variance(&vw);
                [v.x, v.y, v.z]
            })
            .collect(),
        _ => vec![[0.0; 3]; cfg.horizon],
    };
    Ok(NmpcSolution {
        controls,
        states,
        cost,
        kkt_residual: kkt,
        sqp_iters: iters,
        status,
        solve_time: start.elapsed().as_secs_f64(),
        max_defect,
        max_obstacle_violation: if obstacles.is_empty() { f64::NEG_INFINITY } else { max_obs },
        slack_total,
        predicted_variance,
    })
}

/// Solves one NMPC problem; a previous solution, if given, is shifted by
/// one step and used as the initial guess.
pub fn solve(
    cfg: &NmpcConfig,
    x_cur: &State,
    reference: &ReferenceSlice,
    obstacles: &[Obstacle],
    warm_start: Option<&NmpcSolution>,
    model: Option<&ResidualModel>,
) -> Result<NmpcSolution> {
    let shifted = warm_start.map(|s| shift_solution(s, model, cfg.dt));
    solve_with_guess(cfg, x_cur, reference, obstacles, shifted.as_ref(), model, None)
}

/// Stateful receding-horizon solver that warm-starts from its previous plan.
pub struct NmpcSolver {
    cfg: NmpcConfig,
    previous: Option<NmpcSolution>,
    diagnostics: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for NmpcSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NmpcSolver")
            .field("cfg", &self.cfg)
            .field("warm", &self.previous.is_some())
            .finish()
    }
}

impl NmpcSolver {
    pub fn new(cfg: NmpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            previous: None,
            diagnostics: None,
        })
    }

    /// Streams one JSON line per SQP iteration into `sink`.
    pub fn with_diagnostics(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.diagnostics = Some(sink);
        self
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn previous(&self) -> Option<&NmpcSolution> {
        self.previous.as_ref()
    }

    pub fn solve(
        &mut self,
        x_cur: &State,
        reference: &ReferenceSlice,
        obstacles: &[Obstacle],
        model: Option<&ResidualModel>,
    ) -> Result<NmpcSolution> {
        let shifted = self.previous.as_ref().map(|s| shift_solution(s, model, self.cfg.dt));
        let sink = self.diagnostics.as_mut().map(|b| b.as_mut() as &mut dyn Write);
        let sol = solve_with_guess(&self.cfg, x_cur, reference, obstacles, shifted.as_ref(), model, sink)?;
        self.previous = Some(sol.clone());
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(n: usize, speed: f64, dt: f64) -> ReferenceSlice {
        let states = (0..=n)
            .map(|i| State::at(speed * dt * i as f64, 0.0, 1.0, 0.0))
            .collect();
        let controls = vec![ControlInput::new(Vector3::new(speed, 0.0, 0.0), 0.0); n];
        ReferenceSlice::new(states, controls).unwrap()
    }

    #[test]
    fn straight_line_is_tracked_exactly() {
        let cfg = NmpcConfig::default();
        let r = straight(cfg.horizon, 1.0, cfg.dt);
        let sol = solve(&cfg, &r.states[0], &r, &[], None, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.cost <= 1e-6, "cost {}", sol.cost);
        for (u, ur) in sol.controls.iter().zip(&r.controls) {
            assert!((u.to_vector() - ur.to_vector()).amax() < 1e-6);
        }
    }

    #[test]
    fn offset_start_converges_feasibly() {
        let cfg = NmpcConfig::default();
        let r = straight(cfg.horizon, 1.0, cfg.dt);
        let x0 = State::at(-0.5, 0.4, 0.8, 0.3);
        let sol = solve(&cfg, &x0, &r, &[], None, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{sol:?}");
        assert!(sol.max_defect <= 1e-6);
        for u in &sol.controls {
            assert!(u.within_bounds(cfg.v_max, cfg.omega_max));
        }
    }

    #[test]
    fn obstacle_on_the_path_is_avoided() {
        let cfg = NmpcConfig::default();
        let r = straight(cfg.horizon, 1.5, cfg.dt);
        let obs = [Obstacle::at(1.5, 0.05, 1.0)];
        let sol = solve_with_guess(&cfg, &r.states[0], &r, &obs, None, None, None).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{sol:?}");
        assert!(sol.max_obstacle_violation <= 1e-4);
        let clearance = sol.states[1..]
            .iter()
            .map(|s| obs[0].distance(&s.p))
            .fold(f64::INFINITY, f64::min);
        assert!(clearance >= cfg.d_o - 1e-3, "clearance {clearance}");
    }

    #[test]
    fn zero_speed_limit_pins_the_states() {
        let cfg = NmpcConfig {
            v_max: 0.0,
            omega_max: 0.0,
            ..Default::default()
        };
        let r = straight(cfg.horizon, 1.0, cfg.dt);
        let x0 = r.states[0];
        let sol = solve(&cfg, &x0, &r, &[], None, None).unwrap();
        for s in &sol.states {
            assert!((s.to_vector() - x0.to_vector()).amax() < 1e-9);
        }
        let q = Vector4::from(cfg.q);
        let r_w = Vector4::from(cfg.r);
        let expected: f64 = r
            .states
            .iter()
            .map(|s| {
                let e = s.to_vector() - x0.to_vector();
                e.dot(&q.component_mul(&e))
            })
            .sum::<f64>()
            + r.controls
                .iter()
                .map(|u| u.to_vector().dot(&r_w.component_mul(&u.to_vector())))
                .sum::<f64>();
        assert!((sol.cost - expected).abs() < 1e-6 * expected.max(1.0));
    }

    #[test]
    fn warm_start_on_unchanged_problem() {
        let cfg = NmpcConfig::default();
        let r = straight(cfg.horizon, 1.0, cfg.dt);
        let x0 = State::at(-0.3, 0.2, 1.1, 0.2);
        let obs = [Obstacle::at(1.0, 0.3, 1.0)];
        let first = solve(&cfg, &x0, &r, &obs, None, None).unwrap();
        let again = solve_with_guess(&cfg, &x0, &r, &obs, Some(&first), None, None).unwrap();
        assert_eq!(again.status, SolveStatus::Converged);
        assert!(again.sqp_iters <= 2);
    }

    #[test]
    fn diagnostics_are_json_lines() {
        let cfg = NmpcConfig::default();
        let r = straight(cfg.horizon, 1.0, cfg.dt);
        let mut buf = Vec::new();
        let x0 = State::at(0.2, 0.2, 1.0, 0.0);
        solve_with_guess(&cfg, &x0, &r, &[], None, None, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().count() >= 1);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kkt_residual").is_some() && v.get("step_length").is_some());
        }
    }
}
