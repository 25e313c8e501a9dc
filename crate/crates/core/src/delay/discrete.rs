//! Discrete reporting-lag machinery: conversions between lag probabilities
//! and conditional (sequential) probabilities, the multinomial / sequential
//! binomial / beta-binomial likelihood forms, the Dirichlet-to-beta map, and
//! the rejection sampler for the non-conjugate posterior of a censored cell's
//! lag-probability vector.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm::logsumexp_unchecked;

/// Lag probabilities p_0..p_D on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayProbVector(pub Vec<f64>);

impl DelayProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let s: f64 = p.iter().sum();
        if p.iter().any(|&v| v < -1e-12) || (s - 1.0).abs() > 1e-10 {
            return Err(Error::validation(format!(
                "lag probabilities must lie on the simplex (sum = {s})"
            )));
        }
        Ok(Self(p))
    }

    pub fn d_max(&self) -> usize {
        self.0.len() - 1
    }

    /// `p^r` up to lag `index` inclusive.
    pub fn reported_mass(&self, index: usize) -> f64 {
        self.0[..=index.min(self.d_max())].iter().sum()
    }
}

/// Conditional probabilities q_1..q_D: chance a claim is reported at lag d
/// given it is reported by lag d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalQVector(pub Vec<f64>);

/// Dirichlet parameters eta_0..eta_D (all positive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams(pub Vec<f64>);

impl DirichletParams {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.iter().any(|&e| e.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !e.is_finite()) {
            return Err(Error::validation("Dirichlet parameters must be positive"));
        }
        Ok(Self(eta))
    }
}

// ---------------------------------------------------------------------------
// q <-> p
// ---------------------------------------------------------------------------

/// Rebuild lag probabilities from conditional ones:
/// `p_D = q_D`, then `p_d = q_d (1 - sum_{j>d} p_j)` descending, and
/// `p_0 = 1 - sum_{j>=1} p_j`.
pub fn q_to_p(q: &ConditionalQVector) -> DelayProbVector {
    let d_max = q.0.len();
    let mut p = vec![0.0; d_max + 1];
    let mut tail = 0.0; // sum of p_j for j > d
    for d in (1..=d_max).rev() {
        p[d] = q.0[d - 1] * (1.0 - tail);
        tail += p[d];
    }
    p[0] = (1.0 - tail).max(0.0);
    DelayProbVector(p)
}

/// `q_d = p_d / sum_{j<=d} p_j`; zero cumulative mass yields `q_d = 0`.
pub fn p_to_q(p: &DelayProbVector) -> ConditionalQVector {
    let mut q = Vec::with_capacity(p.d_max());
    let mut cum = p.0[0];
    for d in 1..=p.d_max() {
        cum += p.0[d];
        q.push(if cum > 0.0 { p.0[d] / cum } else { 0.0 });
    }
    ConditionalQVector(q)
}

// ---------------------------------------------------------------------------
// Likelihood forms
// ---------------------------------------------------------------------------

#[inline]
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[inline]
fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Multinomial log-likelihood of observed lag counts with probabilities
/// renormalized to the observed window `0..=index`. Returns `-inf` (never an
/// `Err`) when positive counts meet zero reported mass.
pub fn multinomial_delay_loglik(z: &[u64], p: &DelayProbVector, index: usize) -> f64 {
    let index = index.min(p.d_max()).min(z.len() - 1);
    let pr = p.reported_mass(index);
    let n: u64 = z[..=index].iter().sum();
    if n == 0 {
        return 0.0;
    }
    if pr <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut ll = ln_gamma(n as f64 + 1.0);
    for (d, &zd) in z[..=index].iter().enumerate() {
        ll -= ln_gamma(zd as f64 + 1.0);
        ll += xlogy(zd as f64, p.0[d] / pr);
        if zd > 0 && p.0[d] <= 0.0 {
            return f64::NEG_INFINITY;
        }
    }
    ll
}

/// The same quantity written as a product of sequential binomial likelihoods
/// with success probabilities `q_d = p_d / sum_{j<=d} p_j`. The failure
/// probability is evaluated as the cumulative ratio `s_{d-1} / s_d` rather
/// than `1 - q_d`, which cancels catastrophically when `q_d` is near one.
pub fn binomial_decomposition_loglik(z: &[u64], p: &DelayProbVector, index: usize) -> f64 {
    let index = index.min(p.d_max()).min(z.len() - 1);
    let mut ll = 0.0;
    let mut cum_before = z[0] as f64;
    let mut s_before = p.0[0];
    for d in 1..=index {
        let zd = z[d] as f64;
        let trials = cum_before + zd;
        let s_here = s_before + p.0[d];
        let qd = if s_here > 0.0 { p.0[d] / s_here } else { 0.0 };
        let one_minus_qd = if s_here > 0.0 { s_before / s_here } else { 1.0 };
        if zd > 0.0 && qd <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if cum_before > 0.0 && one_minus_qd <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += ln_choose(trials, zd) + xlogy(zd, qd) + xlogy(cum_before, one_minus_qd);
        cum_before = trials;
        s_before = s_here;
    }
    ll
}

/// Beta-binomial log-pmf of `z_d` successes given `cum_before` earlier-lag
/// claims, with the Dirichlet-implied prior `Beta(eta_d, sum_{j<d} eta_j)`.
pub fn beta_binomial_loglik(
    z_d: u64,
    cum_before: u64,
    eta: &DirichletParams,
    d: usize,
) -> Result<f64> {
    if d == 0 || d >= eta.0.len() {
        return Err(Error::validation(format!("lag {d} outside 1..=D")));
    }
    let (a, b) = dirichlet_to_beta(eta, d)?;
    let zd = z_d as f64;
    let cb = cum_before as f64;
    let ln_beta = |x: f64, y: f64| ln_gamma(x) + ln_gamma(y) - ln_gamma(x + y);
    Ok(ln_choose(cb + zd, zd) + ln_beta(zd + a, cb + b) - ln_beta(a, b))
}

/// Prop-3 map: `q_d ~ Beta(eta_d, sum_{j<d} eta_j)` when `p ~ Dirichlet(eta)`.
pub fn dirichlet_to_beta(eta: &DirichletParams, d: usize) -> Result<(f64, f64)> {
    if d == 0 || d >= eta.0.len() {
        return Err(Error::validation(format!("lag {d} outside 1..=D")));
    }
    Ok((eta.0[d], eta.0[..d].iter().sum()))
}

// ---------------------------------------------------------------------------
// Posterior of p for a censored cell
// ---------------------------------------------------------------------------

/// The posterior of a censored cell's lag-probability vector:
/// `density(p) ∝ h(p) g(p)` with `h` a tilted Dirichlet (counts added over
/// the observed lags) and
/// `g(p) = sum_j pi_j lambda_j^{n_r} exp(-lambda_j p^r)`, `p^r = sum_{d<=split} p_d`.
#[derive(Debug, Clone)]
pub struct PosteriorSpec {
    pub eta: DirichletParams,
    /// Observed counts for lags `0..=split`.
    pub observed_z: Vec<u64>,
    pub n_reported: u64,
    /// State mixing weights (sum to one).
    pub mixing: Vec<f64>,
    /// Per-cell Poisson means before reporting-thinning, exposure included.
    pub state_means: Vec<f64>,
    /// Largest observed lag `T - t`; lags above it are censored.
    pub split: usize,
}

impl PosteriorSpec {
    pub fn validate(&self) -> Result<()> {
        let d_max = self.eta.0.len() - 1;
        if self.split > d_max {
            return Err(Error::validation("split index beyond max lag"));
        }
        if self.observed_z.len() != self.split + 1 {
            return Err(Error::validation("observed counts must cover lags 0..=split"));
        }
        if self.observed_z.iter().sum::<u64>() != self.n_reported {
            return Err(Error::validation("n_reported must equal the sum of observed counts"));
        }
        if self.mixing.len() != self.state_means.len() || self.mixing.is_empty() {
            return Err(Error::validation("mixing weights and state means differ"));
        }
        if self.state_means.iter().any(|&l| l < 0.0) {
            return Err(Error::validation("state means must be non-negative"));
        }
        Ok(())
    }

    /// Proposal parameters: observed lags get `z_d + eta_d`, censored keep `eta_d`.
    fn proposal_params(&self) -> Vec<f64> {
        self.eta
            .0
            .iter()
            .enumerate()
            .map(|(d, &e)| if d <= self.split { e + self.observed_z[d] as f64 } else { e })
            .collect()
    }

    /// `log g(p)` evaluated through `p^r`.
    pub fn log_g(&self, p_reported: f64) -> f64 {
        let terms: Vec<f64> = self
            .mixing
            .iter()
            .zip(&self.state_means)
            .map(|(&w, &lam)| log_mix_term(w, lam, self.n_reported) - lam * p_reported)
            .collect();
        logsumexp_unchecked(&terms)
    }

    /// `sup_p g(p) <= sum_j pi_j lambda_j^{n_r}` (the usable upper bound).
    pub fn log_g_bound(&self) -> f64 {
        let terms: Vec<f64> = self
            .mixing
            .iter()
            .zip(&self.state_means)
            .map(|(&w, &lam)| log_mix_term(w, lam, self.n_reported))
            .collect();
        logsumexp_unchecked(&terms)
    }
}

#[inline]
fn log_mix_term(weight: f64, lambda: f64, n_reported: u64) -> f64 {
    if weight <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let pow = if n_reported == 0 {
        0.0
    } else if lambda <= 0.0 {
        return f64::NEG_INFINITY;
    } else {
        n_reported as f64 * lambda.ln()
    };
    weight.ln() + pow
}

/// Unnormalized log posterior density at a simplex point.
pub fn posterior_log_density(spec: &PosteriorSpec, p: &DelayProbVector) -> Result<f64> {
    spec.validate()?;
    if p.0.len() != spec.eta.0.len() {
        return Err(Error::validation("probability vector length mismatch"));
    }
    let mut log_h = 0.0;
    for (d, &pd) in p.0.iter().enumerate() {
        let expo = if d <= spec.split {
            spec.observed_z[d] as f64 + spec.eta.0[d] - 1.0
        } else {
            spec.eta.0[d] - 1.0
        };
        log_h += xlogy(expo, pd.max(f64::MIN_POSITIVE));
    }
    Ok(log_h + spec.log_g(p.reported_mass(spec.split)))
}

/// Draws from the posterior together with the observed acceptance rate.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub draws: Vec<DelayProbVector>,
    pub acceptance_rate: f64,
}

/// Multivariate rejection sampler: propose from the tilted Dirichlet `h`,
/// accept with probability `g(p) / sup g`. A 100-draw probe batch aborts
/// early when the acceptance rate collapses.
pub fn sample_posterior<R: Rng>(
    spec: &PosteriorSpec,
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorSample> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::validation("need at least one sample"));
    }
    let alpha = spec.proposal_params();
    let gammas: Vec<Gamma<f64>> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map_err(|e| Error::computation(format!("bad proposal parameter {a}: {e}")))
        })
        .collect::<Result<_>>()?;
    let log_bound = spec.log_g_bound();

    let mut draws = Vec::with_capacity(n_samples);
    let mut attempts = 0u64;
    let mut accepted = 0u64;
    const PROBE: u64 = 100;
    let max_attempts = 10_000 + 200 * n_samples as u64 * 100;

    while draws.len() < n_samples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::computation(format!(
                "rejection sampler exhausted {max_attempts} attempts (acceptance {:.2e})",
                accepted as f64 / attempts as f64
            )));
        }
        if attempts == PROBE && accepted == 0 {
            // Crude probe: zero acceptances in the probe batch is compatible
            // with a rate below ~3e-2; keep going unless the cap is tiny.
            if max_attempts < PROBE * 2 {
                break;
            }
        }
        if attempts == 1_000_000 && (accepted as f64 / attempts as f64) < 1e-4 {
            return Err(Error::computation(
                "rejection sampler acceptance rate below 1e-4; parameters look pathological",
            ));
        }
        let mut p: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        // NaN-safe guard: resample on underflow or non-finite sums.
        if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            continue;
        }
        p.iter_mut().for_each(|v| *v = (*v / total).max(1e-300));
        let pr: f64 = p[..=spec.split].iter().sum();
        let log_g = spec.log_g(pr);
        if log_g > log_bound + 1e-9 {
            return Err(Error::computation(format!(
                "rejection bound violated: log g = {log_g} > bound {log_bound}"
            )));
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        if u.ln() <= log_g - log_bound {
            accepted += 1;
            draws.push(DelayProbVector(p));
        }
    }

    Ok(PosteriorSample {
        draws,
        acceptance_rate: accepted as f64 / attempts.max(1) as f64,
    })
}

/// Draw from a plain Dirichlet (used by the generator and IBNR simulation).
pub fn sample_dirichlet<R: Rng>(eta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut p = Vec::with_capacity(eta.len());
    for &a in eta {
        let g = Gamma::new(a, 1.0)
            .map_err(|e| Error::computation(format!("bad Dirichlet parameter {a}: {e}")))?;
        p.push(g.sample(rng));
    }
    let total: f64 = p.iter().sum();
    if total.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        // All gammas underflowed; fall back to the mean direction.
        let s: f64 = eta.iter().sum();
        return Ok(eta.iter().map(|&a| a / s).collect());
    }
    p.iter_mut().for_each(|v| *v = (*v / total).max(1e-300));
    Ok(p)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn q_to_p_examples() {
        let p = q_to_p(&ConditionalQVector(vec![0.0]));
        assert_eq!(p.0, vec![1.0, 0.0]);
        let p = q_to_p(&ConditionalQVector(vec![0.2, 0.1]));
        assert!((p.0[0] - 0.72).abs() < 1e-15);
        assert!((p.0[1] - 0.18).abs() < 1e-15);
        assert!((p.0[2] - 0.10).abs() < 1e-15);
        let p = q_to_p(&ConditionalQVector(vec![1.0, 1.0, 1.0]));
        assert_eq!(p.0, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn p_to_q_examples() {
        let q = p_to_q(&DelayProbVector(vec![0.72, 0.18, 0.10]));
        assert!((q.0[0] - 0.2).abs() < 1e-15);
        assert!((q.0[1] - 0.1).abs() < 1e-15);
        let q = p_to_q(&DelayProbVector(vec![1.0, 0.0, 0.0]));
        assert_eq!(q.0, vec![0.0, 0.0]);
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_dirichlet(&[1.0, 1.0, 1.0, 1.0, 1.0], &mut rng).unwrap();
            let p = DelayProbVector(p);
            let back = q_to_p(&p_to_q(&p));
            for (a, b) in p.0.iter().zip(&back.0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multinomial_examples() {
        let p = DelayProbVector(vec![0.8, 0.2]);
        let ll = multinomial_delay_loglik(&[1, 0], &p, 1);
        assert!((ll - 0.8f64.ln()).abs() < 1e-12);
        let p = DelayProbVector(vec![0.5, 0.5]);
        let ll = multinomial_delay_loglik(&[2, 1], &p, 1);
        assert!((ll - 0.375f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn multinomial_equals_binomial_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..300 {
            let d_max = rng.gen_range(1..6usize);
            let p = DelayProbVector(
                sample_dirichlet(&vec![0.8; d_max + 1], &mut rng).unwrap(),
            );
            let index = rng.gen_range(1..=d_max);
            let z: Vec<u64> = (0..=d_max).map(|_| rng.gen_range(0..6u64)).collect();
            let a = multinomial_delay_loglik(&z, &p, index);
            let b = binomial_decomposition_loglik(&z, &p, index);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_reported_mass_flagged() {
        let p = DelayProbVector(vec![0.0, 0.0, 1.0]);
        let ll = multinomial_delay_loglik(&[1, 0], &p, 1);
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn beta_binomial_examples() {
        // Uniform Beta(1,1): every z_d equally likely among m+1 outcomes.
        let eta = DirichletParams(vec![1.0, 1.0]);
        let m = 5u64;
        for zd in 0..=m {
            let ll = beta_binomial_loglik(zd, m - zd, &eta, 1).unwrap();
            assert!((ll - (1.0 / (m as f64 + 1.0)).ln()).abs() < 1e-10);
        }
        // Empty data has probability one.
        let ll = beta_binomial_loglik(0, 0, &eta, 1).unwrap();
        assert!(ll.abs() < 1e-12);
        // One trial at lag d: success probability a/(a+b) = 2/5.
        let eta = DirichletParams(vec![3.0, 2.0]);
        let ll = beta_binomial_loglik(1, 0, &eta, 1).unwrap();
        assert!((ll - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_to_beta_map() {
        let eta = DirichletParams(vec![1.0, 1.0]);
        assert_eq!(dirichlet_to_beta(&eta, 1).unwrap(), (1.0, 1.0));
        let eta = DirichletParams(vec![2.0, 3.0, 4.0]);
        assert_eq!(dirichlet_to_beta(&eta, 2).unwrap(), (4.0, 5.0));
        assert!(dirichlet_to_beta(&eta, 0).is_err());
        assert!(dirichlet_to_beta(&eta, 3).is_err());
    }

    #[test]
    fn prop3_monte_carlo() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let eta = DirichletParams(vec![2.0, 1.5, 0.8, 1.2]);
        let d = 2;
        let (a, b) = dirichlet_to_beta(&eta, d).unwrap();
        let n = 40_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let p = sample_dirichlet(&eta.0, &mut rng).unwrap();
            let cum: f64 = p[..=d].iter().sum();
            let q = p[d] / cum;
            acc += q;
            acc2 += q * q;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let expect_mean = a / (a + b);
        let se = (var / n as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se, "mean {mean} vs {expect_mean}");
    }

    fn simple_spec() -> PosteriorSpec {
        PosteriorSpec {
            eta: DirichletParams(vec![2.0, 1.0, 0.7]),
            observed_z: vec![3, 1],
            n_reported: 4,
            mixing: vec![0.6, 0.4],
            state_means: vec![2.0, 5.0],
            split: 1,
        }
    }

    #[test]
    fn posterior_density_conjugate_when_untruncated() {
        // split = D: g depends on p only through p^r = 1, so density ratios
        // match the conjugate Dirichlet(eta + z).
        let spec = PosteriorSpec {
            eta: DirichletParams(vec![2.0, 1.0, 0.7]),
            observed_z: vec![3, 1, 2],
            n_reported: 6,
            mixing: vec![1.0],
            state_means: vec![4.0],
            split: 2,
        };
        let p1 = DelayProbVector(vec![0.5, 0.3, 0.2]);
        let p2 = DelayProbVector(vec![0.2, 0.5, 0.3]);
        let ratio = posterior_log_density(&spec, &p1).unwrap()
            - posterior_log_density(&spec, &p2).unwrap();
        let post = [2.0 + 3.0, 1.0 + 1.0, 0.7 + 2.0];
        let conj = |p: &[f64]| -> f64 {
            p.iter().zip(&post).map(|(&pi, &a)| (a - 1.0) * pi.ln()).sum()
        };
        let expect = conj(&p1.0) - conj(&p2.0);
        assert!((ratio - expect).abs() < 1e-10);
    }

    #[test]
    fn posterior_density_monotone_in_reported_mass_when_empty() {
        // n_r = 0: g(p) decreasing in p^r.
        let spec = PosteriorSpec {
            eta: DirichletParams(vec![1.0, 1.0, 1.0]),
            observed_z: vec![0, 0],
            n_reported: 0,
            mixing: vec![0.5, 0.5],
            state_means: vec![1.0, 3.0],
            split: 1,
        };
        assert!(spec.log_g(0.2) > spec.log_g(0.8));
        // Degenerate mixture with lambda = 0 reduces to h alone: g constant.
        let spec0 = PosteriorSpec {
            state_means: vec![0.0, 0.0],
            ..spec
        };
        assert!((spec0.log_g(0.2) - spec0.log_g(0.8)).abs() < 1e-15);
    }

    #[test]
    fn sampler_acceptance_one_when_g_constant() {
        let spec = PosteriorSpec {
            eta: DirichletParams(vec![1.5, 1.0, 0.5]),
            observed_z: vec![0, 0],
            n_reported: 0,
            mixing: vec![1.0],
            state_means: vec![0.0],
            split: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let out = sample_posterior(&spec, 500, &mut rng).unwrap();
        assert_eq!(out.acceptance_rate, 1.0);
    }

    #[test]
    fn sampler_matches_conjugate_moments_when_untruncated() {
        let spec = PosteriorSpec {
            eta: DirichletParams(vec![2.0, 1.0, 0.7]),
            observed_z: vec![3, 1, 2],
            n_reported: 6,
            mixing: vec![0.6, 0.4],
            state_means: vec![2.0, 5.0],
            split: 2,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 20_000;
        let out = sample_posterior(&spec, n, &mut rng).unwrap();
        let post = [5.0, 2.0, 2.7];
        let total: f64 = post.iter().sum();
        for d in 0..3 {
            let mean: f64 = out.draws.iter().map(|p| p.0[d]).sum::<f64>() / n as f64;
            let expect = post[d] / total;
            let var = post[d] * (total - post[d]) / (total * total * (total + 1.0));
            let se = (var / n as f64).sqrt();
            assert!((mean - expect).abs() < 3.5 * se, "d={d}: {mean} vs {expect}");
        }
    }

    #[test]
    fn sampler_matches_importance_sampling_when_truncated() {
        let spec = simple_spec();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 20_000;
        let out = sample_posterior(&spec, n, &mut rng).unwrap();
        let rej_mean: f64 =
            out.draws.iter().map(|p| p.reported_mass(spec.split)).sum::<f64>() / n as f64;
        let rej_var: f64 = out
            .draws
            .iter()
            .map(|p| (p.reported_mass(spec.split) - rej_mean).powi(2))
            .sum::<f64>()
            / n as f64;

        // Importance sampling with proposal h, weights g.
        let alpha = spec.proposal_params();
        let mut wsum = 0.0;
        let mut wxsum = 0.0;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_dirichlet(&alpha, &mut rng).unwrap();
            let pr: f64 = p[..=spec.split].iter().sum();
            let w = (spec.log_g(pr) - spec.log_g_bound()).exp();
            wsum += w;
            wxsum += w * pr;
            samples.push((w, pr));
        }
        let is_mean = wxsum / wsum;
        let wbar = wsum / n as f64;
        let var_is: f64 = samples
            .iter()
            .map(|&(w, x)| (w * (x - is_mean) / wbar).powi(2))
            .sum::<f64>()
            / (n as f64 * n as f64);
        let se = (rej_var / n as f64 + var_is).sqrt();
        assert!(
            (rej_mean - is_mean).abs() < 3.0 * se.max(1e-6),
            "rejection {rej_mean} vs IS {is_mean} (se {se})"
        );
    }

    #[test]
    fn beta_binomial_is_dirichlet_mixture_of_binomials() {
        // Marginalizing the sequential binomial over Dirichlet draws of q
        // reproduces the beta-binomial.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let eta = DirichletParams(vec![2.0, 1.5, 1.0]);
        let d = 2usize;
        let (z_d, cum_before) = (2u64, 3u64);
        let n = 60_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let p = sample_dirichlet(&eta.0, &mut rng).unwrap();
            let cum: f64 = p[..=d].iter().sum();
            let q = p[d] / cum;
            let pmf = (ln_choose((z_d + cum_before) as f64, z_d as f64)
                + xlogy(z_d as f64, q)
                + xlogy(cum_before as f64, 1.0 - q))
            .exp();
            acc += pmf;
            acc2 += pmf * pmf;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let expect = beta_binomial_loglik(z_d, cum_before, &eta, d).unwrap().exp();
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");
    }
}
