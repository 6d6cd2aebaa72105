//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min ½ xᵀHx + gᵀx  s.t.  cᵢᵀx ≥ bᵢ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpFailure {
    Infeasible,
    IterationLimit,
}

/// Inequality constraints stored row-wise: `rows · x ≥ rhs`.
#[derive(Debug, Clone)]
pub struct Inequalities {
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl Inequalities {
    pub fn empty(n: usize) -> Self {
        Self {
            rows: DMatrix::zeros(0, n),
            rhs: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }
}

/// Growable row builder for [`Inequalities`].
#[derive(Debug, Clone)]
pub struct InequalityBuilder {
    n: usize,
    data: Vec<f64>,
    rhs: Vec<f64>,
}

impl InequalityBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            data: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.data.extend_from_slice(row);
        self.rhs.push(rhs);
    }

    /// Adds `x_i ≥ lo`.
    pub fn lower_bound(&mut self, i: usize, lo: f64) {
        let start = self.data.len();
        self.data.resize(start + self.n, 0.0);
        self.data[start + i] = 1.0;
        self.rhs.push(lo);
    }

    /// Adds `x_i ≤ hi`.
    pub fn upper_bound(&mut self, i: usize, hi: f64) {
        let start = self.data.len();
        self.data.resize(start + self.n, 0.0);
        self.data[start + i] = -1.0;
        self.rhs.push(-hi);
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn build(self) -> Inequalities {
        let m = self.rhs.len();
        Inequalities {
            rows: DMatrix::from_row_slice(m, self.n, &self.data),
            rhs: DVector::from_vec(self.rhs),
        }
    }
}

fn rotation(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, c0: usize, c1: usize, c: f64, s: f64) {
    for i in 0..j.nrows() {
        let (a, b) = (j[(i, c0)], j[(i, c1)]);
        j[(i, c0)] = c * a + s * b;
        j[(i, c1)] = -s * a + c * b;
    }
}

/// Solves the QP. `tol` is the absolute feasibility tolerance on each row.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    cons: &Inequalities,
    tol: f64,
) -> std::result::Result<QpSolution, QpFailure> {
    let n = g.len();
    let m = cons.len();
    let l = match h.clone().cholesky() {
        Some(ch) => ch.unpack(),
        None => return Err(QpFailure::Infeasible),
    };
    // J = L⁻ᵀ, so that Jᵀ H J = I.
    let mut jm = l
        .tr_solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("positive factor");
    let mut x = -(&jm * (jm.transpose() * g));
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 10 * (n + m) + 50;
    let mut iterations = 0usize;

    'outer: loop {
        // Most violated inactive constraint.
        let slack = &cons.rows * &x - &cons.rhs;
        let mut p = None;
        let mut worst = -tol;
        for i in 0..m {
            if slack[i] < worst && !active.contains(&i) {
                worst = slack[i];
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        let np: DVector<f64> = cons.rows.row(p).transpose();
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpFailure::IterationLimit);
            }
            let q = active.len();
            let d = jm.transpose() * &np;
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &jm.column(k), 1.0);
            }
            let mut rdir = vec![0.0; q];
            for k in (0..q).rev() {
                let mut s = d[k];
                for c in (k + 1)..q {
                    s -= r[(k, c)] * rdir[c];
                }
                rdir[k] = s / r[(k, k)];
            }

            // Dual step length.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if rdir[k] > 0.0 {
                    let ratio = u[k] / rdir[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            // Primal step length.
            let zn = z.dot(&np);
            let sp = np.dot(&x) - cons.rhs[p];
            let t2 = if zn.abs() > 1e-14 * np.norm_squared().max(1.0) {
                -sp / zn
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpFailure::Infeasible);
            }
            if t2.is_infinite() {
                // Partial step in the dual only.
                for k in 0..q {
                    u[k] -= t1 * rdir[k];
                }
                u_plus += t1;
                let k = drop.expect("finite dual step");
                remove_active(&mut jm, &mut r, &mut active, &mut u, k);
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for k in 0..q {
                u[k] -= t * rdir[k];
            }
            u_plus += t;
            if t2 <= t1 {
                // Full step: p becomes active.
                let mut dv = d.clone();
                for k in ((q + 1)..n).rev() {
                    let (c, s, hyp) = rotation(dv[k - 1], dv[k]);
                    dv[k - 1] = hyp;
                    dv[k] = 0.0;
                    rotate_columns(&mut jm, k - 1, k, c, s);
                }
                for k in 0..=q {
                    r[(k, q)] = dv[k];
                }
                if r[(q, q)].abs() < 1e-14 {
                    return Err(QpFailure::Infeasible);
                }
                active.push(p);
                u.push(u_plus);
                continue 'outer;
            }
            let k = drop.expect("finite dual step");
            remove_active(&mut jm, &mut r, &mut active, &mut u, k);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        multipliers[i] = u[k];
    }
    let objective = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
    Ok(QpSolution {
        x,
        multipliers,
        objective,
        iterations,
        active,
    })
}

fn remove_active(jm: &mut DMatrix<f64>, r: &mut DMatrix<f64>, active: &mut Vec<usize>, u: &mut Vec<f64>, k: usize) {
    let q = active.len();
    active.remove(k);
    u.remove(k);
    // Drop column k of R, then restore triangular form.
    for c in k..(q - 1) {
        for row in 0..q {
            r[(row, c)] = r[(row, c + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for j in k..(q - 1) {
        let (c, s, hyp) = rotation(r[(j, j)], r[(j + 1, j)]);
        r[(j, j)] = hyp;
        r[(j + 1, j)] = 0.0;
        for col in (j + 1)..(q - 1) {
            let (a, b) = (r[(j, col)], r[(j + 1, col)]);
            r[(j, col)] = c * a + s * b;
            r[(j + 1, col)] = -s * a + c * b;
        }
        rotate_columns(jm, j, j + 1, c, s);
    }
}

/// Convenience wrapper that maps failures onto the crate error type.
pub fn solve_qp_checked(h: &DMatrix<f64>, g: &DVector<f64>, cons: &Inequalities, tol: f64) -> Result<QpSolution> {
    solve_qp(h, g, cons, tol).map_err(|e| Error::Solver(format!("QP subproblem failed: {e:?}")))
}
