//! BFGS ascent with backtracking line search, used for both the exact-GP
//! hyperparameters and the sparse-GP bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Stop once the gradient 2-norm drops below this.
    pub grad_tol: f64,
    /// Largest per-coordinate change allowed in one step.
    pub max_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            max_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub params: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const DIVERGENCE_WINDOW: usize = 10;

/// Maximizes `objective`, which returns `(value, gradient)`.
///
/// Objective evaluations that fail or return non-finite values inside the
/// line search are treated as rejected trial points; a non-finite value at
/// the initial point is an error.
pub fn maximize<F>(mut objective: F, init: DVector<f64>, opts: &AscentOptions) -> Result<AscentResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = init.len();
    let mut x = init;
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimizer {
            message: "non-finite objective at the initial point".into(),
            iteration: 0,
            objective: f,
        });
    }
    let mut trace = vec![f];
    // Inverse Hessian of the negated objective.
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut decreases = 0usize;

    for iter in 0..opts.max_iters {
        let gnorm = g.norm();
        if gnorm < opts.grad_tol {
            return Ok(AscentResult {
                params: x,
                value: f,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
                trace,
            });
        }
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            // Lost ascent direction; restart from steepest ascent.
            hinv = DMatrix::identity(n, n);
            dir = g.clone();
        }
        if first {
            dir /= gnorm.max(1.0);
        }
        let biggest = dir.amax();
        if biggest > opts.max_step {
            dir *= opts.max_step / biggest;
        }
        let slope = dir.dot(&g);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &dir * step;
            if let Ok((ft, gt)) = objective(&trial) {
                if ft.is_finite()
                    && gt.iter().all(|v| v.is_finite())
                    && ft >= f + ARMIJO * step * slope
                {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // No further progress is possible at working precision.
            return Ok(AscentResult {
                params: x,
                value: f,
                grad_norm: gnorm,
                iterations: iter,
                converged: false,
                trace,
            });
        };

        let s = &xn - &x;
        // Gradient of the negated objective changes by -(gn - g).
        let yv = &g - &gn;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first {
                hinv *= sy / yv.dot(&yv);
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }

        if fn_ < f {
            decreases += 1;
            if decreases >= DIVERGENCE_WINDOW {
                let tail = trace.iter().rev().take(DIVERGENCE_WINDOW).rev().copied().collect();
                return Err(Error::Divergence {
                    iterations: iter + 1,
                    trace: tail,
                });
            }
        } else {
            decreases = 0;
        }
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
    }

    let gnorm = g.norm();
    Ok(AscentResult {
        params: x,
        value: f,
        grad_norm: gnorm,
        iterations: opts.max_iters,
        converged: gnorm < opts.grad_tol,
        trace,
    })
}
