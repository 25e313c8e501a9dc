//! BFGS maximizer with Armijo backtracking, shared by the Dirichlet
//! regression and the reporting-delay likelihood fits.

use crate::error::{Error, Result};

pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Max-norm gradient tolerance.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tol: 1e-8 }
    }
}

pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximize `f` (which returns value and gradient) starting at `x0`.
pub fn maximize_bfgs<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut grad) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::computation("objective not finite at the starting point"));
    }
    // Inverse-Hessian approximation, dense row-major.
    let mut h_inv = identity(n);
    let mut iterations = 0;
    let mut converged = max_norm(&grad) < opts.grad_tol;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        // Ascent direction d = H_inv * grad.
        let mut dir = mat_vec(&h_inv, &grad, n);
        let mut slope = dot(&dir, &grad);
        if slope <= 0.0 {
            // Curvature information went bad; reset to steepest ascent.
            h_inv = identity(n);
            dir = grad.clone();
            slope = dot(&dir, &grad);
            if slope == 0.0 {
                break;
            }
        }

        // Backtracking line search on the Armijo condition.
        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..60 {
            let x_new: Vec<f64> =
                x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            match f(&x_new) {
                Ok((f_new, g_new)) if f_new.is_finite() && f_new >= fx + 1e-4 * step * slope => {
                    accepted = Some((x_new, f_new, g_new));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No improving step along this direction; treat as converged if
            // the gradient is already small, otherwise give up.
            break;
        };

        // BFGS update of the inverse Hessian (note: maximization, so the
        // roles of s and y are as in minimizing -f with g -> -g).
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            let hy = mat_vec(&h_inv, &y, n);
            let yhy = dot(&y, &hy);
            let c1 = (sy + yhy) / (sy * sy);
            for i in 0..n {
                for j in 0..n {
                    h_inv[i * n + j] += c1 * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }

        x = x_new;
        fx = f_new;
        grad = g_new;
        converged = max_norm(&grad) < opts.grad_tol;
    }

    Ok(BfgsOutcome { x, value: fx, iterations, converged })
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
}
