//! Weighted maximum quasi-likelihood regression kernels used by the EM
//! M-steps: Poisson with log link and offset, binomial with logit /
//! complementary log-log / log links, and Dirichlet regression. All of
//! them accept non-integer responses and fractional weights.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};

/// Probability below which Dirichlet responses are clipped before `ln`.
pub const PROB_CLIP: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Design matrix
// ---------------------------------------------------------------------------

/// Dense design matrix with named columns; the intercept column, when wanted,
/// is part of the rows. Rank is enforced by the fitters (a rank-deficient
/// normal-equations system is reported as an error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    rows: Vec<Vec<f64>>,
    pub names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(rows: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let p = names.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::validation("design rows do not match column names"));
        }
        Ok(Self { rows, names })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    #[inline]
    pub fn dot(&self, k: usize, beta: &[f64]) -> f64 {
        self.rows[k].iter().zip(beta).map(|(x, b)| x * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Cloglog,
    Log,
}

impl Link {
    /// Inverse link q = g^{-1}(eta), clamped to the open unit interval.
    #[inline]
    pub fn inverse(self, eta: f64) -> f64 {
        let q = match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Cloglog => 1.0 - (-eta.exp()).exp(),
            Link::Log => eta.exp(),
        };
        q.clamp(1e-12, 1.0 - 1e-12)
    }

    #[inline]
    pub fn apply(self, q: f64) -> f64 {
        match self {
            Link::Logit => (q / (1.0 - q)).ln(),
            Link::Cloglog => (-(1.0 - q).ln()).ln(),
            Link::Log => q.ln(),
        }
    }

    /// dq/deta evaluated through q (with eta implied).
    #[inline]
    fn derivative(self, eta: f64, q: f64) -> f64 {
        match self {
            Link::Logit => q * (1.0 - q),
            Link::Cloglog => (eta - eta.exp()).exp(),
            Link::Log => eta.exp(),
        }
    }
}

/// Result of a Poisson or binomial quasi-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedGlm {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final log quasi-likelihood (up to data-only constants).
    pub log_likelihood: f64,
    pub diagnostic: Option<String>,
}

const SCORE_TOL: f64 = 1e-8;
const MAX_NEWTON_ITER: usize = 100;

// ---------------------------------------------------------------------------
// Weighted Poisson
// ---------------------------------------------------------------------------

/// Weighted Poisson quasi-likelihood with offset:
/// `Q(beta) = sum_k w_k (y_k eta_k - exp(eta_k))`, `eta = X beta + offset`.
pub struct PoissonLikelihood<'a> {
    pub x: &'a DesignMatrix,
    pub y: &'a [f64],
    pub weights: &'a [f64],
    pub offset: &'a [f64],
}

impl PoissonLikelihood<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.x.n_rows();
        if self.y.len() != n || self.weights.len() != n || self.offset.len() != n {
            return Err(Error::validation("poisson fit: input lengths differ"));
        }
        if self.weights.iter().any(|&w| w < 0.0) || self.y.iter().any(|&y| y < 0.0) {
            return Err(Error::validation("poisson fit: negative weight or response"));
        }
        if !self.weights.iter().zip(self.offset).any(|(&w, &o)| w > 0.0 && o.is_finite()) {
            return Err(Error::validation("poisson fit: no positive-weight observations"));
        }
        Ok(())
    }

    /// True for rows that actually contribute to the objective.
    #[inline]
    fn active(&self, k: usize) -> bool {
        self.weights[k] > 0.0 && self.offset[k].is_finite()
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        (0..self.x.n_rows())
            .filter(|&k| self.active(k))
            .map(|k| {
                let eta = self.x.dot(k, beta) + self.offset[k];
                self.weights[k] * (self.y[k] * eta - eta.exp())
            })
            .sum()
    }

    pub fn score(&self, beta: &[f64]) -> Vec<f64> {
        let p = self.x.n_cols();
        let mut s = vec![0.0; p];
        for k in 0..self.x.n_rows() {
            if !self.active(k) {
                continue;
            }
            let eta = self.x.dot(k, beta) + self.offset[k];
            let r = self.weights[k] * (self.y[k] - eta.exp());
            for (sj, &xkj) in s.iter_mut().zip(self.x.row(k)) {
                *sj += r * xkj;
            }
        }
        s
    }
}

pub fn fit_weighted_poisson(
    x: &DesignMatrix,
    y: &[f64],
    weights: &[f64],
    offset: &[f64],
) -> Result<FittedGlm> {
    let lik = PoissonLikelihood { x, y, weights, offset };
    lik.validate()?;
    let p = x.n_cols();
    let mut beta = vec![0.0; p];
    let mut q = lik.loglik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_norm = f64::INFINITY;
    let mut stalls = 0;

    // Iterate past the convergence flag down to the f64 rounding floor so
    // closed-form cases agree with the analytic optimum to ~1e-12.
    while iterations < MAX_NEWTON_ITER {
        iterations += 1;
        let score = lik.score(&beta);
        let norm = optim::max_norm(&score);
        if norm < SCORE_TOL {
            converged = true;
        }
        if norm < 1e-12 {
            break;
        }
        if norm >= prev_norm * 0.99 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
        prev_norm = norm;

        // Newton direction from the expected information X' W_mu X.
        let mut info = DMatrix::<f64>::zeros(p, p);
        for k in 0..x.n_rows() {
            if !lik.active(k) {
                continue;
            }
            let eta = x.dot(k, &beta) + offset[k];
            let w = weights[k] * eta.exp();
            let row = x.row(k);
            for a in 0..p {
                for b in a..p {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let delta = solve_spd(&info, &score)
            .ok_or_else(|| Error::validation("poisson fit: design matrix is rank-deficient"))?;

        // Step-halving keeps the quasi-likelihood non-decreasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let qc = lik.loglik(&cand);
            if qc.is_finite() && qc >= q - 1e-14 * (1.0 + q.abs()) {
                beta = cand;
                q = qc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    Ok(FittedGlm {
        coefficients: beta,
        converged,
        iterations,
        log_likelihood: q,
        diagnostic: if converged { None } else { Some("max iterations".into()) },
    })
}

// ---------------------------------------------------------------------------
// Weighted binomial
// ---------------------------------------------------------------------------

/// Binomial quasi-likelihood
/// `L(beta) = sum_k [s_k log q_k + (n_k - s_k) log(1 - q_k)]`,
/// `q = link^{-1}(X beta)`. Fractional successes and trials are allowed.
pub struct BinomialLikelihood<'a> {
    pub x: &'a DesignMatrix,
    pub successes: &'a [f64],
    pub trials: &'a [f64],
    pub link: Link,
}

impl BinomialLikelihood<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.x.n_rows();
        if self.successes.len() != n || self.trials.len() != n {
            return Err(Error::validation("binomial fit: input lengths differ"));
        }
        for k in 0..n {
            if self.successes[k] < 0.0 || self.successes[k] > self.trials[k] + 1e-9 {
                return Err(Error::validation(format!(
                    "binomial fit row {k}: successes outside [0, trials]"
                )));
            }
        }
        Ok(())
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        (0..self.x.n_rows())
            .filter(|&k| self.trials[k] > 0.0)
            .map(|k| {
                let q = self.link.inverse(self.x.dot(k, beta));
                self.successes[k] * q.ln() + (self.trials[k] - self.successes[k]) * (1.0 - q).ln()
            })
            .sum()
    }

    pub fn score(&self, beta: &[f64]) -> Vec<f64> {
        let p = self.x.n_cols();
        let mut s = vec![0.0; p];
        for k in 0..self.x.n_rows() {
            if self.trials[k] <= 0.0 {
                continue;
            }
            let eta = self.x.dot(k, beta);
            let q = self.link.inverse(eta);
            let dq = self.link.derivative(eta, q);
            let r = (self.successes[k] - self.trials[k] * q) * dq / (q * (1.0 - q));
            for (sj, &xkj) in s.iter_mut().zip(self.x.row(k)) {
                *sj += r * xkj;
            }
        }
        s
    }
}

pub fn fit_weighted_binomial(
    x: &DesignMatrix,
    successes: &[f64],
    trials: &[f64],
    link: Link,
) -> Result<FittedGlm> {
    let lik = BinomialLikelihood { x, successes, trials, link };
    lik.validate()?;
    let p = x.n_cols();
    let total_s: f64 = successes.iter().sum();
    let total_n: f64 = trials.iter().sum();
    let boundary = total_s <= 0.0 || total_s >= total_n;

    let mut beta = vec![0.0; p];
    let mut q = lik.loglik(&beta);
    let mut iterations = 0;
    let mut converged = false;
    let max_iter = if boundary { 25 } else { MAX_NEWTON_ITER };
    let mut prev_norm = f64::INFINITY;
    let mut stalls = 0;

    while iterations < max_iter {
        iterations += 1;
        let score = lik.score(&beta);
        let norm = optim::max_norm(&score);
        if norm < SCORE_TOL {
            converged = true;
        }
        if norm < 1e-12 {
            break;
        }
        if norm >= prev_norm * 0.99 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
        prev_norm = norm;
        let mut info = DMatrix::<f64>::zeros(p, p);
        for k in 0..x.n_rows() {
            if trials[k] <= 0.0 {
                continue;
            }
            let eta = x.dot(k, &beta);
            let qk = link.inverse(eta);
            let dq = link.derivative(eta, qk);
            let w = trials[k] * dq * dq / (qk * (1.0 - qk));
            let row = x.row(k);
            for a in 0..p {
                for b in a..p {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let delta = solve_spd(&info, &score)
            .ok_or_else(|| Error::validation("binomial fit: design matrix is rank-deficient"))?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let qc = lik.loglik(&cand);
            if qc.is_finite() && qc >= q - 1e-14 * (1.0 + q.abs()) {
                beta = cand;
                q = qc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let diagnostic = if boundary {
        converged = false;
        Some("responses on the boundary (all zero or all saturated)".into())
    } else if !converged {
        Some("max iterations".into())
    } else {
        None
    };

    Ok(FittedGlm { coefficients: beta, converged, iterations, log_likelihood: q, diagnostic })
}

// ---------------------------------------------------------------------------
// Dirichlet regression
// ---------------------------------------------------------------------------

/// Fitted Dirichlet regression: `eta_d(x) = exp(x . coefficients[d])`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletRegressionFit {
    /// One coefficient vector per lag component (D+1 of them).
    pub coefficients: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl DirichletRegressionFit {
    /// Implied Dirichlet parameters for one covariate row.
    pub fn eta(&self, x_row: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|beta| {
                let lin: f64 = x_row.iter().zip(beta).map(|(x, b)| x * b).sum();
                lin.exp()
            })
            .collect()
    }
}

/// Weighted Dirichlet log-likelihood with log-linear parameters.
pub struct DirichletLikelihood<'a> {
    pub x: &'a DesignMatrix,
    /// Rows on the simplex, already clipped away from zero; `log_p` holds
    /// their logs.
    pub log_p: Vec<Vec<f64>>,
    pub weights: &'a [f64],
    pub n_components: usize,
}

impl DirichletLikelihood<'_> {
    /// Value and gradient over the flattened coefficient matrix
    /// (component-major: beta[d * p + j]).
    pub fn value_grad(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.x.n_cols();
        let c = self.n_components;
        let mut value = 0.0;
        let mut grad = vec![0.0; c * p];
        for k in 0..self.x.n_rows() {
            let w = self.weights[k];
            if w == 0.0 {
                continue;
            }
            let row = self.x.row(k);
            let eta: Vec<f64> = (0..c)
                .map(|d| {
                    let lin: f64 =
                        row.iter().zip(&flat[d * p..(d + 1) * p]).map(|(x, b)| x * b).sum();
                    lin.exp()
                })
                .collect();
            let eta_sum: f64 = eta.iter().sum();
            if !eta_sum.is_finite() {
                return Err(Error::computation(format!(
                    "dirichlet regression: non-finite parameters at row {k}"
                )));
            }
            let mut term = ln_gamma(eta_sum);
            let dig_sum = digamma(eta_sum);
            for d in 0..c {
                term += -ln_gamma(eta[d]) + (eta[d] - 1.0) * self.log_p[k][d];
                let dd = eta[d] * (dig_sum - digamma(eta[d]) + self.log_p[k][d]);
                for (g, &xj) in grad[d * p..(d + 1) * p].iter_mut().zip(row) {
                    *g += w * dd * xj;
                }
            }
            if !term.is_finite() {
                return Err(Error::computation(format!(
                    "dirichlet regression: non-finite log-likelihood at row {k}"
                )));
            }
            value += w * term;
        }
        Ok((value, grad))
    }
}

/// Normalize a probability row, requiring it to be within `1e-9` of the
/// simplex, and clip entries below `PROB_CLIP`.
fn prepare_prob_row(row: &[f64], k: usize) -> Result<Vec<f64>> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|&p| p < -1e-12) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "dirichlet regression row {k}: probabilities sum to {s}"
        )));
    }
    Ok(row.iter().map(|&p| (p / s).max(PROB_CLIP)).collect())
}

pub fn fit_dirichlet_regression(
    x: &DesignMatrix,
    prob_rows: &[Vec<f64>],
    weights: &[f64],
) -> Result<DirichletRegressionFit> {
    let c = prob_rows.first().map_or(0, |r| r.len());
    let mut log_p = Vec::with_capacity(prob_rows.len());
    for (k, row) in prob_rows.iter().enumerate() {
        if row.len() != c {
            return Err(Error::validation("dirichlet regression: ragged probability rows"));
        }
        let cl = prepare_prob_row(row, k)?;
        log_p.push(cl.iter().map(|&v| v.ln()).collect::<Vec<_>>());
    }
    fit_dirichlet_regression_logs(x, log_p, weights, None)
}

/// Dirichlet regression on expected log components: maximizes
/// `sum_k w_k [-log B(eta(x_k)) + sum_d (eta_d(x_k) - 1) log_p[k][d]]`.
///
/// The `log_p` rows need not exponentiate onto the simplex; in the EM
/// M-step they are conditional expectations of `log p`, whose spread is what
/// keeps concentration estimates finite on cells with little data.
pub fn fit_dirichlet_regression_logs(
    x: &DesignMatrix,
    log_p: Vec<Vec<f64>>,
    weights: &[f64],
    warm_start: Option<&[Vec<f64>]>,
) -> Result<DirichletRegressionFit> {
    let n = x.n_rows();
    if log_p.len() != n || weights.len() != n {
        return Err(Error::validation("dirichlet regression: input lengths differ"));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::validation("dirichlet regression: negative weights"));
    }
    if weights.iter().filter(|&&w| w > 0.0).count() < 2 {
        return Err(Error::validation(
            "dirichlet regression: need at least two observations with positive weight",
        ));
    }
    let c = log_p.first().map_or(0, |r| r.len());
    if c < 2 {
        return Err(Error::validation("dirichlet regression: need at least two components"));
    }
    let p = x.n_cols();

    let flat0 = match warm_start {
        Some(coefs) => {
            if coefs.len() != c || coefs.iter().any(|b| b.len() != p) {
                return Err(Error::validation("dirichlet regression: warm start shape mismatch"));
            }
            coefs.iter().flatten().copied().collect()
        }
        None => {
            // Method-of-moments intercept initialization, zero slopes, from
            // the exponentiated (renormalized) responses.
            let wsum: f64 = weights.iter().sum();
            let rows: Vec<Vec<f64>> = log_p
                .iter()
                .map(|r| {
                    let mut row: Vec<f64> = r.iter().map(|&lp| lp.exp()).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v = (*v / s).max(PROB_CLIP));
                    row
                })
                .collect();
            let mut mean = vec![0.0; c];
            for (row, &w) in rows.iter().zip(weights) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= wsum);
            let mut var = vec![0.0; c];
            for (row, &w) in rows.iter().zip(weights) {
                for d in 0..c {
                    var[d] += w * (row[d] - mean[d]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= wsum);
            let mut conc_terms = Vec::new();
            for d in 0..c {
                if var[d] > 1e-12 && mean[d] > PROB_CLIP && mean[d] < 1.0 - PROB_CLIP {
                    conc_terms.push(mean[d] * (1.0 - mean[d]) / var[d] - 1.0);
                }
            }
            let conc = if conc_terms.is_empty() {
                1.0
            } else {
                (conc_terms.iter().sum::<f64>() / conc_terms.len() as f64).max(0.1)
            };
            let mut flat = vec![0.0; c * p];
            for d in 0..c {
                flat[d * p] = (mean[d].max(PROB_CLIP) * conc).ln();
            }
            flat
        }
    };

    let sum_w: f64 = weights.iter().sum();
    let lik = DirichletLikelihood { x, log_p, weights, n_components: c };
    let opts = BfgsOptions { max_iterations: 300, grad_tol: 1e-6 * sum_w.max(1.0) };
    let out = optim::maximize_bfgs(|b| lik.value_grad(b), &flat0, &opts)?;

    let coefficients: Vec<Vec<f64>> =
        (0..c).map(|d| out.x[d * p..(d + 1) * p].to_vec()).collect();
    Ok(DirichletRegressionFit {
        coefficients,
        converged: out.converged,
        iterations: out.iterations,
        log_likelihood: out.value,
    })
}

// ---------------------------------------------------------------------------

fn solve_spd(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let chol = Cholesky::new(a.clone())?;
    let sol = chol.solve(&DVector::from_column_slice(b));
    Some(sol.iter().copied().collect())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::Distribution;

    fn intercept_design(n: usize) -> DesignMatrix {
        DesignMatrix::new(vec![vec![1.0]; n], vec!["(intercept)".into()]).unwrap()
    }

    #[test]
    fn poisson_intercept_closed_forms() {
        let x = intercept_design(3);
        let y = [1.0, 2.0, 3.0];
        let w = [1.0, 1.0, 1.0];
        let off = [0.0, 0.0, 0.0];
        let fit = fit_weighted_poisson(&x, &y, &w, &off).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 2.0f64.ln()).abs() < 1e-10);

        // Constant response, arbitrary positive weights.
        let y = [4.0, 4.0, 4.0];
        let w = [0.2, 1.5, 3.0];
        let fit = fit_weighted_poisson(&x, &y, &w, &off).unwrap();
        assert!((fit.coefficients[0] - 4.0f64.ln()).abs() < 1e-10);

        // Exposure offset: beta0 = log(sum w y / sum w e).
        let y = [1.0, 0.0, 2.0];
        let w = [1.0, 2.0, 0.5];
        let e = [0.5f64, 1.0, 0.25];
        let off: Vec<f64> = e.iter().map(|v: &f64| v.ln()).collect();
        let fit = fit_weighted_poisson(&x, &y, &w, &off).unwrap();
        let expect = (2.0f64 / (0.5 + 2.0 + 0.125)).ln();
        assert!((fit.coefficients[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn poisson_rejects_bad_inputs() {
        let x = intercept_design(2);
        assert!(fit_weighted_poisson(&x, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(fit_weighted_poisson(&x, &[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).is_err());
        // Rank-deficient: duplicated column.
        let xd = DesignMatrix::new(
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        assert!(fit_weighted_poisson(&xd, &[1.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn binomial_intercept_closed_forms() {
        let x = intercept_design(2);
        let fit =
            fit_weighted_binomial(&x, &[3.0, 3.0], &[10.0, 10.0], Link::Logit).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (0.3f64 / 0.7).ln()).abs() < 1e-8);

        // cloglog pooled proportion.
        let fit =
            fit_weighted_binomial(&x, &[2.0, 4.0], &[10.0, 10.0], Link::Cloglog).unwrap();
        let qhat = 0.3;
        assert!((fit.coefficients[0] - (-(1.0f64 - qhat).ln()).ln()).abs() < 1e-8);

        // Symmetric data under logit gives beta = 0.
        let fit =
            fit_weighted_binomial(&x, &[5.0, 5.0], &[10.0, 10.0], Link::Logit).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-10);
    }

    #[test]
    fn binomial_links_agree_through_transform() {
        let x = intercept_design(4);
        let s = [1.0, 2.0, 0.5, 3.0];
        let n = [5.0, 5.0, 5.0, 5.0];
        let a = fit_weighted_binomial(&x, &s, &n, Link::Logit).unwrap();
        let b = fit_weighted_binomial(&x, &s, &n, Link::Cloglog).unwrap();
        let qa = Link::Logit.inverse(a.coefficients[0]);
        let qb = Link::Cloglog.inverse(b.coefficients[0]);
        assert!((qa - qb).abs() < 1e-8);
    }

    #[test]
    fn binomial_boundary_flagged() {
        let x = intercept_design(3);
        let fit =
            fit_weighted_binomial(&x, &[0.0, 0.0, 0.0], &[4.0, 4.0, 4.0], Link::Logit).unwrap();
        assert!(!fit.converged);
        assert!(fit.diagnostic.as_deref().unwrap_or("").contains("boundary"));
        let fit =
            fit_weighted_binomial(&x, &[4.0, 4.0, 4.0], &[4.0, 4.0, 4.0], Link::Cloglog)
                .unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 40;
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| vec![1.0, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)]).collect();
        let x = DesignMatrix::new(rows, vec!["i".into(), "a".into(), "b".into()]).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
        let off: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let lik = PoissonLikelihood { x: &x, y: &y, weights: &w, offset: &off };
        for _ in 0..5 {
            let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let score = lik.score(&beta);
            for j in 0..3 {
                let h = 1e-6;
                let mut bp = beta.clone();
                bp[j] += h;
                let mut bm = beta.clone();
                bm[j] -= h;
                let fd = (lik.loglik(&bp) - lik.loglik(&bm)) / (2.0 * h);
                let rel = (score[j] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "poisson rel err {rel}");
            }
        }
    }

    #[test]
    fn dirichlet_symmetric_mean() {
        let x = intercept_design(20);
        let rows = vec![vec![0.5, 0.5]; 20];
        let w = vec![1.0; 20];
        let fit = fit_dirichlet_regression(&x, &rows, &w).unwrap();
        let eta = fit.eta(&[1.0]);
        let mean0 = eta[0] / (eta[0] + eta[1]);
        assert!((mean0 - 0.5).abs() < 1e-6, "mean {mean0}");
    }

    #[test]
    fn dirichlet_degenerate_weights_error() {
        let x = intercept_design(3);
        let rows = vec![vec![0.5, 0.5]; 3];
        let w = vec![0.0, 0.0, 1.0];
        assert!(fit_dirichlet_regression(&x, &rows, &w).is_err());
    }


    /// Digamma inverse by Newton iterations (initialization per the usual
    /// asymptotics), for the fixed-point oracle below.
    fn inv_digamma(y: f64) -> f64 {
        let mut x = if y >= -2.22 { y.exp() + 0.5 } else { -1.0 / (y - digamma(1.0)) };
        for _ in 0..40 {
            let step = (digamma(x) - y) / trigamma(x);
            x -= step;
            if step.abs() < 1e-14 * (1.0 + x.abs()) {
                break;
            }
        }
        x
    }

    /// Trigamma via the recurrence and the asymptotic series.
    fn trigamma(mut x: f64) -> f64 {
        let mut acc = 0.0;
        while x < 6.0 {
            acc += 1.0 / (x * x);
            x += 1.0;
        }
        let inv = 1.0 / x;
        let inv2 = inv * inv;
        acc + inv
            * (1.0
                + inv / 2.0
                + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0))))
    }

    #[test]
    fn dirichlet_recovery_matches_independent_mle() {
        // Rows sampled from Dirichlet(2, 1, 1); intercept-only regression
        // must recover the parameters and agree with a fixed-point MLE that
        // shares no code with the BFGS path.
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let truth = [2.0, 1.0, 1.0];
        let n = 10_000;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row: Vec<f64> = truth
                .iter()
                .map(|&a| {
                    rand_distr::Gamma::new(a, 1.0).unwrap().sample(&mut rng)
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            rows.push(row);
        }
        let x = intercept_design(n);
        let w = vec![1.0; n];
        let fit = fit_dirichlet_regression(&x, &rows, &w).unwrap();
        let eta_hat = fit.eta(&[1.0]);
        for d in 0..3 {
            let rel = (eta_hat[d] / truth[d] - 1.0).abs();
            assert!(rel < 0.10, "component {d}: {} vs {}", eta_hat[d], truth[d]);
        }

        // Independent oracle: Minka's fixed point on the clipped mean logs
        // (the same preprocessing the regression applies).
        let mut mean_log = [0.0f64; 3];
        for row in &rows {
            let s: f64 = row.iter().sum();
            for d in 0..3 {
                mean_log[d] += (row[d] / s).max(PROB_CLIP).ln();
            }
        }
        mean_log.iter_mut().for_each(|v| *v /= n as f64);
        let mut eta = [1.0f64; 3];
        for _ in 0..500 {
            let total: f64 = eta.iter().sum();
            let mut next = [0.0f64; 3];
            let mut moved = 0.0;
            for d in 0..3 {
                next[d] = inv_digamma(digamma(total) + mean_log[d]);
                moved += (next[d] - eta[d]).abs();
            }
            eta = next;
            if moved < 1e-13 {
                break;
            }
        }
        for d in 0..3 {
            let rel = (eta_hat[d] / eta[d] - 1.0).abs();
            assert!(
                rel < 1e-4,
                "component {d}: regression {} vs fixed point {}",
                eta_hat[d],
                eta[d]
            );
        }
    }

    #[test]
    fn dirichlet_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 25;
        let rows_x: Vec<Vec<f64>> =
            (0..n).map(|_| vec![1.0, rng.gen_range(-1.0..1.0)]).collect();
        let x = DesignMatrix::new(rows_x, vec!["i".into(), "z".into()]).unwrap();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a = rng.gen_range(0.1..0.8);
                let b = rng.gen_range(0.05..(0.95 - a));
                vec![a, b, 1.0 - a - b]
            })
            .collect();
        let w = vec![1.0; n];
        let log_p: Vec<Vec<f64>> = probs
            .iter()
            .map(|r| r.iter().map(|&v| v.max(PROB_CLIP).ln()).collect())
            .collect();
        let lik = DirichletLikelihood { x: &x, log_p, weights: &w, n_components: 3 };
        let flat: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let (_, grad) = lik.value_grad(&flat).unwrap();
        for j in 0..6 {
            let h = 1e-6;
            let mut fp = flat.clone();
            fp[j] += h;
            let mut fm = flat.clone();
            fm[j] -= h;
            let fd =
                (lik.value_grad(&fp).unwrap().0 - lik.value_grad(&fm).unwrap().0) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "dirichlet rel err {rel}");
        }
    }
}
