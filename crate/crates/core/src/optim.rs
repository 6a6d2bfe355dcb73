//! BFGS quasi-Newton maximisation with a backtracking (Armijo) line search.
//!
//! The inverse-Hessian approximation is dense, so each iteration costs
//! `O(p²)` on top of the function evaluations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop once the Euclidean norm of the gradient falls to this value.
    pub grad_tol: f64,
    /// Sufficient-increase constant of the Armijo condition.
    pub armijo: f64,
    /// Step halvings tried before a line search is declared failed.
    pub max_halvings: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
            armijo: 1e-4,
            max_halvings: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub line_searches: usize,
    pub converged: bool,
}

/// Maximises `f`, which returns the objective and its gradient. Evaluation
/// errors during a line search shrink the step; an error at `x0` is returned.
pub fn maximize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    // Work with φ = -f.
    let eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (v, g) = f(x.as_slice())?;
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            return Err(Error::numerical("non-finite objective", None));
        }
        Ok((-v, -DVector::from_vec(g)))
    };

    let mut x = DVector::from_column_slice(x0);
    let (mut phi, mut g) = eval(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut iterations = 0;
    let mut line_searches = 0;
    let mut converged = g.norm() <= opts.grad_tol;

    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h.fill_with_identity();
            h_is_identity = true;
            d = -g.clone();
            slope = g.dot(&d);
        }

        line_searches += 1;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let x_new = &x + alpha * &d;
            if let Ok((phi_new, g_new)) = eval(&x_new) {
                let sufficient = phi_new <= phi + opts.armijo * alpha * slope;
                // Near the optimum the decrease drops below rounding; accept
                // a step that leaves φ unchanged to rounding but shrinks |g|.
                let flat = (phi_new - phi).abs() <= 1e-13 * phi.abs().max(1.0)
                    && g_new.norm() < g.norm();
                if sufficient || flat {
                    accepted = Some((x_new, phi_new, g_new));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, phi_new, g_new)) = accepted else {
            if h_is_identity {
                break;
            }
            h.fill_with_identity();
            h_is_identity = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if h_is_identity {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ, expanded.
            h -= rho * (&hy * s.transpose() + &s * hy.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
            h_is_identity = false;
        }

        x = x_new;
        phi = phi_new;
        g = g_new;
        converged = g.norm() <= opts.grad_tol;
    }

    Ok(BfgsOutcome {
        x: x.as_slice().to_vec(),
        value: -phi,
        grad: (-&g).as_slice().to_vec(),
        grad_norm: g.norm(),
        iterations,
        line_searches,
        converged,
    })
}
