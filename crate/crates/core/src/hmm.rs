//! Log-space forward-backward recursions, smoothing, and Viterbi decoding
//! for the shared hidden environment chain.
//!
//! Per-state emission probabilities here are products of per-policy pmfs, so
//! they underflow long before `f64` gives up; every recursion therefore runs
//! in log space with `logsumexp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// `log(sum_k exp(v_k))` by max-shift. Errors on an empty slice.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("logsumexp of empty slice"));
    }
    Ok(logsumexp_unchecked(values))
}

#[inline]
pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if values.len() == 1 {
        return values[0];
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Poisson log-pmf `n log(mu) - mu - log(n!)`, with the `mu = 0` boundary
/// handled exactly (point mass at zero).
#[inline]
pub fn poisson_log_pmf(n: u64, mu: f64) -> f64 {
    if mu == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let nf = n as f64;
    nf * mu.ln() - mu - statrs::function::gamma::ln_gamma(nf + 1.0)
}

// ---------------------------------------------------------------------------
// Parameters and emissions
// ---------------------------------------------------------------------------

/// Initial distribution and transition matrix of the hidden chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub pi1: Vec<f64>,
    /// Row-major g x g transition matrix; `gamma[j][k] = P(C_t = k | C_{t-1} = j)`.
    pub gamma: Vec<Vec<f64>>,
}

impl HmmParams {
    pub fn new(pi1: Vec<f64>, gamma: Vec<Vec<f64>>) -> Result<Self> {
        let params = Self { pi1, gamma };
        params.validate()?;
        Ok(params)
    }

    pub fn g(&self) -> usize {
        self.pi1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.pi1.len();
        if g == 0 {
            return Err(Error::validation("need at least one state"));
        }
        if self.gamma.len() != g || self.gamma.iter().any(|r| r.len() != g) {
            return Err(Error::validation("transition matrix shape mismatch"));
        }
        if self.pi1.iter().any(|&p| p < 0.0) || (self.pi1.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::validation("pi1 must be a probability vector"));
        }
        for (j, row) in self.gamma.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::validation(format!("gamma row {j} must be stochastic")));
            }
        }
        Ok(())
    }

    /// Marginal state distribution at each period: `pi_t = pi_1 Gamma^{t-1}`.
    pub fn marginal_states(&self, t_len: usize) -> Vec<Vec<f64>> {
        let g = self.g();
        let mut out = Vec::with_capacity(t_len);
        let mut cur = self.pi1.clone();
        for t in 0..t_len {
            if t > 0 {
                let mut next = vec![0.0; g];
                for j in 0..g {
                    for (k, n) in next.iter_mut().enumerate() {
                        *n += cur[j] * self.gamma[j][k];
                    }
                }
                cur = next;
            }
            out.push(cur.clone());
        }
        out
    }

    /// Stationary distribution of `gamma` (power iteration).
    pub fn stationary(&self) -> Vec<f64> {
        let g = self.g();
        let mut pi = vec![1.0 / g as f64; g];
        for _ in 0..10_000 {
            let mut next = vec![0.0; g];
            for j in 0..g {
                for (k, n) in next.iter_mut().enumerate() {
                    *n += pi[j] * self.gamma[j][k];
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }
}

/// T x g matrix of per-period, per-state log emission probabilities
/// (already summed over policies).
#[derive(Debug, Clone)]
pub struct LogEmissionMatrix {
    pub t_len: usize,
    pub g: usize,
    values: Vec<f64>,
}

impl LogEmissionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t_len = rows.len();
        let g = rows.first().map_or(0, |r| r.len());
        if t_len == 0 || g == 0 {
            return Err(Error::validation("empty emission matrix"));
        }
        let mut values = Vec::with_capacity(t_len * g);
        for row in rows {
            if row.len() != g {
                return Err(Error::validation("ragged emission rows"));
            }
            values.extend(row);
        }
        Ok(Self { t_len, g, values })
    }

    /// Build row `t` with `f(t)`, in parallel across periods.
    pub fn build(
        t_len: usize,
        g: usize,
        f: impl Fn(usize) -> Vec<f64> + Sync + Send,
    ) -> Result<Self> {
        let matrix = Self::from_rows(par::map_range(t_len, f))?;
        debug_assert_eq!(matrix.g, g);
        Ok(matrix)
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.g + j]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.g..(t + 1) * self.g]
    }

    fn check_finite(&self) -> Result<()> {
        for t in 0..self.t_len {
            for j in 0..self.g {
                if self.get(t, j).is_nan() {
                    return Err(Error::computation(format!(
                        "NaN emission at period {t}, state {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Forward-backward
// ---------------------------------------------------------------------------

/// Smoothed state and transition posteriors with the observed log-likelihood.
#[derive(Debug, Clone)]
pub struct SmoothedPosteriors {
    /// `u_hat[t][j] = P(C_t = j | data)`.
    pub u_hat: Vec<Vec<f64>>,
    /// `v_hat[t][j][k] = P(C_t = j, C_{t+1} = k | data)` for `t = 0..T-2`.
    pub v_hat: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
}

pub fn forward_backward(
    params: &HmmParams,
    emissions: &LogEmissionMatrix,
) -> Result<SmoothedPosteriors> {
    params.validate()?;
    emissions.check_finite()?;
    let g = params.g();
    if emissions.g != g {
        return Err(Error::validation("emission state count mismatch"));
    }
    let t_len = emissions.t_len;
    let log_pi: Vec<f64> = params.pi1.iter().map(|&p| p.ln()).collect();
    let log_gamma: Vec<Vec<f64>> =
        params.gamma.iter().map(|r| r.iter().map(|&p| p.ln()).collect()).collect();

    // Forward: alpha[t][j] = log P(data_{1..t}, C_t = j).
    let mut alpha = vec![vec![0.0f64; g]; t_len];
    for j in 0..g {
        alpha[0][j] = log_pi[j] + emissions.get(0, j);
    }
    let mut scratch = vec![0.0f64; g];
    for t in 1..t_len {
        for k in 0..g {
            for j in 0..g {
                scratch[j] = alpha[t - 1][j] + log_gamma[j][k];
            }
            alpha[t][k] = logsumexp_unchecked(&scratch) + emissions.get(t, k);
        }
    }
    let log_likelihood = logsumexp_unchecked(&alpha[t_len - 1]);
    if !log_likelihood.is_finite() {
        return Err(Error::computation(format!(
            "observed log-likelihood is {log_likelihood}"
        )));
    }

    // Backward: beta[t][j] = log P(data_{t+1..T} | C_t = j).
    let mut beta = vec![vec![0.0f64; g]; t_len];
    for t in (0..t_len - 1).rev() {
        for j in 0..g {
            for k in 0..g {
                scratch[k] = log_gamma[j][k] + emissions.get(t + 1, k) + beta[t + 1][k];
            }
            beta[t][j] = logsumexp_unchecked(&scratch);
        }
    }

    let mut u_hat = vec![vec![0.0f64; g]; t_len];
    for t in 0..t_len {
        for j in 0..g {
            u_hat[t][j] = (alpha[t][j] + beta[t][j] - log_likelihood).exp();
        }
        // Guard against rounding drift in the normalization.
        let s: f64 = u_hat[t].iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::computation(format!(
                "state posterior at period {t} sums to {s}"
            )));
        }
        for v in u_hat[t].iter_mut() {
            *v /= s;
        }
    }

    let mut v_hat = vec![vec![vec![0.0f64; g]; g]; t_len.saturating_sub(1)];
    for t in 0..t_len.saturating_sub(1) {
        let mut total = 0.0;
        for j in 0..g {
            for k in 0..g {
                let lv = alpha[t][j]
                    + log_gamma[j][k]
                    + emissions.get(t + 1, k)
                    + beta[t + 1][k]
                    - log_likelihood;
                let v = lv.exp();
                v_hat[t][j][k] = v;
                total += v;
            }
        }
        for j in 0..g {
            for k in 0..g {
                v_hat[t][j][k] /= total;
            }
        }
    }

    Ok(SmoothedPosteriors { u_hat, v_hat, log_likelihood })
}

// ---------------------------------------------------------------------------
// Viterbi
// ---------------------------------------------------------------------------

/// Most likely state path; ties break toward the lower state index.
pub fn viterbi(params: &HmmParams, emissions: &LogEmissionMatrix) -> Result<Vec<usize>> {
    params.validate()?;
    emissions.check_finite()?;
    let g = params.g();
    if emissions.g != g {
        return Err(Error::validation("emission state count mismatch"));
    }
    let t_len = emissions.t_len;
    let log_pi: Vec<f64> = params.pi1.iter().map(|&p| p.ln()).collect();
    let log_gamma: Vec<Vec<f64>> =
        params.gamma.iter().map(|r| r.iter().map(|&p| p.ln()).collect()).collect();

    let mut score = vec![vec![f64::NEG_INFINITY; g]; t_len];
    let mut back = vec![vec![0usize; g]; t_len];
    for j in 0..g {
        score[0][j] = log_pi[j] + emissions.get(0, j);
    }
    for t in 1..t_len {
        for k in 0..g {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for j in 0..g {
                let s = score[t - 1][j] + log_gamma[j][k];
                if s > best {
                    best = s;
                    arg = j;
                }
            }
            score[t][k] = best + emissions.get(t, k);
            back[t][k] = arg;
        }
    }
    let mut path = vec![0usize; t_len];
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0usize);
    for j in 0..g {
        if score[t_len - 1][j] > best {
            best = score[t_len - 1][j];
            arg = j;
        }
    }
    path[t_len - 1] = arg;
    for t in (0..t_len - 1).rev() {
        path[t] = back[t + 1][path[t + 1]];
    }
    Ok(path)
}

/// Sample a state path from the joint posterior `P(c_1..c_T | data)` by
/// forward filtering and backward sampling.
pub fn sample_posterior_path<R: rand::Rng>(
    params: &HmmParams,
    emissions: &LogEmissionMatrix,
    rng: &mut R,
) -> Result<Vec<usize>> {
    params.validate()?;
    emissions.check_finite()?;
    let g = params.g();
    if emissions.g != g {
        return Err(Error::validation("emission state count mismatch"));
    }
    let t_len = emissions.t_len;
    let log_pi: Vec<f64> = params.pi1.iter().map(|&p| p.ln()).collect();
    let log_gamma: Vec<Vec<f64>> =
        params.gamma.iter().map(|r| r.iter().map(|&p| p.ln()).collect()).collect();

    let mut alpha = vec![vec![0.0f64; g]; t_len];
    for j in 0..g {
        alpha[0][j] = log_pi[j] + emissions.get(0, j);
    }
    let mut scratch = vec![0.0f64; g];
    for t in 1..t_len {
        for k in 0..g {
            for j in 0..g {
                scratch[j] = alpha[t - 1][j] + log_gamma[j][k];
            }
            alpha[t][k] = logsumexp_unchecked(&scratch) + emissions.get(t, k);
        }
    }

    let sample_from_log = |log_w: &[f64], rng: &mut R| -> usize {
        let norm = logsumexp_unchecked(log_w);
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (k, &lw) in log_w.iter().enumerate() {
            u -= (lw - norm).exp();
            if u < 0.0 {
                return k;
            }
        }
        log_w.len() - 1
    };

    let mut path = vec![0usize; t_len];
    path[t_len - 1] = sample_from_log(&alpha[t_len - 1], rng);
    for t in (0..t_len - 1).rev() {
        for j in 0..g {
            scratch[j] = alpha[t][j] + log_gamma[j][path[t + 1]];
        }
        path[t] = sample_from_log(&scratch, rng);
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Mixed Poisson marginal
// ---------------------------------------------------------------------------

/// `P(N = n) = sum_j pi_j Poisson(n; means_j)`.
pub fn mixed_poisson_pmf(pi: &[f64], means: &[f64], n: i64) -> Result<f64> {
    if n < 0 {
        return Err(Error::validation("count must be non-negative"));
    }
    if pi.len() != means.len() {
        return Err(Error::validation("weights and means differ in length"));
    }
    Ok(pi
        .iter()
        .zip(means)
        .map(|(&w, &mu)| w * poisson_log_pmf(n as u64, mu).exp())
        .sum())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_instance(rng: &mut ChaCha12Rng, g: usize, t_len: usize) -> (HmmParams, LogEmissionMatrix) {
        let mut pi1: Vec<f64> = (0..g).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = pi1.iter().sum();
        pi1.iter_mut().for_each(|p| *p /= s);
        let gamma: Vec<Vec<f64>> = (0..g)
            .map(|_| {
                let mut row: Vec<f64> = (0..g).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                row
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..g).map(|_| rng.gen_range(-8.0..0.0)).collect())
            .collect();
        (HmmParams::new(pi1, gamma).unwrap(), LogEmissionMatrix::from_rows(rows).unwrap())
    }

    /// Exhaustive path-sum oracle for tiny chains.
    pub(crate) fn brute_force_loglik(params: &HmmParams, em: &LogEmissionMatrix) -> f64 {
        let g = params.g();
        let t_len = em.t_len;
        let mut terms = Vec::new();
        let n_paths = g.pow(t_len as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(c % g);
                c /= g;
            }
            let mut lp = params.pi1[path[0]].ln() + em.get(0, path[0]);
            for t in 1..t_len {
                lp += params.gamma[path[t - 1]][path[t]].ln() + em.get(t, path[t]);
            }
            terms.push(lp);
        }
        logsumexp(&terms).unwrap()
    }

    pub(crate) fn brute_force_viterbi(params: &HmmParams, em: &LogEmissionMatrix) -> Vec<usize> {
        let g = params.g();
        let t_len = em.t_len;
        let mut best = f64::NEG_INFINITY;
        let mut best_path = Vec::new();
        for code in 0..g.pow(t_len as u32) {
            let mut c = code;
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(c % g);
                c /= g;
            }
            let mut lp = params.pi1[path[0]].ln() + em.get(0, path[0]);
            for t in 1..t_len {
                lp += params.gamma[path[t - 1]][path[t]].ln() + em.get(t, path[t]);
            }
            if lp > best + 1e-15 {
                best = lp;
                best_path = path;
            }
        }
        best_path
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[3.5]).unwrap(), 3.5);
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2.0f64.ln()).abs() < 1e-15);
        let v = logsumexp(&[-1000.0, -1000.0]).unwrap();
        assert!((v - (-1000.0 + 2.0f64.ln())).abs() < 1e-12);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn degenerate_single_state() {
        let params = HmmParams::new(vec![1.0], vec![vec![1.0]]).unwrap();
        let em = LogEmissionMatrix::from_rows(vec![vec![-1.0], vec![-2.5], vec![-0.5]]).unwrap();
        let post = forward_backward(&params, &em).unwrap();
        assert!((post.log_likelihood - (-4.0)).abs() < 1e-12);
        assert!(post.u_hat.iter().all(|r| (r[0] - 1.0).abs() < 1e-12));
        assert_eq!(viterbi(&params, &em).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn frozen_chain_stays_put() {
        let params = HmmParams::new(
            vec![1.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let em = LogEmissionMatrix::from_rows(vec![
            vec![-5.0, -0.1],
            vec![-9.0, -0.1],
            vec![-2.0, -0.1],
        ])
        .unwrap();
        let post = forward_backward(&params, &em).unwrap();
        for t in 0..3 {
            assert!((post.u_hat[t][0] - 1.0).abs() < 1e-12);
        }
        // pi1 = (0, 1) freezes in the second state.
        let params2 =
            HmmParams::new(vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(viterbi(&params2, &em).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (params, em) = random_instance(&mut rng, 2, 6);
            let post = forward_backward(&params, &em).unwrap();
            let oracle = brute_force_loglik(&params, &em);
            let rel = (post.log_likelihood - oracle).abs() / oracle.abs();
            assert!(rel < 1e-12, "rel err {rel}");
            assert_eq!(viterbi(&params, &em).unwrap(), brute_force_viterbi(&params, &em));
        }
    }

    #[test]
    fn linear_space_matrix_product_agrees() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (params, em) = random_instance(&mut rng, 3, 5);
        // L_T = pi_1 P_1 Gamma P_2 ... Gamma P_T 1'
        let g = params.g();
        let mut v: Vec<f64> =
            (0..g).map(|j| params.pi1[j] * em.get(0, j).exp()).collect();
        for t in 1..em.t_len {
            let mut next = vec![0.0; g];
            for j in 0..g {
                for (k, n) in next.iter_mut().enumerate() {
                    *n += v[j] * params.gamma[j][k];
                }
            }
            for (k, n) in next.iter_mut().enumerate() {
                *n *= em.get(t, k).exp();
            }
            v = next;
        }
        let lin = v.iter().sum::<f64>().ln();
        let post = forward_backward(&params, &em).unwrap();
        assert!((lin - post.log_likelihood).abs() / lin.abs() < 1e-12);
    }

    #[test]
    fn posterior_marginals_consistent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (params, em) = random_instance(&mut rng, 3, 8);
        let post = forward_backward(&params, &em).unwrap();
        for t in 0..em.t_len {
            let s: f64 = post.u_hat[t].iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        for t in 0..em.t_len - 1 {
            let s: f64 = post.v_hat[t].iter().flatten().sum();
            assert!((s - 1.0).abs() < 1e-10);
            for j in 0..params.g() {
                let row: f64 = post.v_hat[t][j].iter().sum();
                assert!((row - post.u_hat[t][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn emission_shift_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (params, em) = random_instance(&mut rng, 2, 6);
        let c = 3.7;
        let shifted_rows: Vec<Vec<f64>> = (0..em.t_len)
            .map(|t| {
                (0..em.g)
                    .map(|j| em.get(t, j) + if t == 2 { c } else { 0.0 })
                    .collect()
            })
            .collect();
        let shifted = LogEmissionMatrix::from_rows(shifted_rows).unwrap();
        let a = forward_backward(&params, &em).unwrap();
        let b = forward_backward(&params, &shifted).unwrap();
        assert!((b.log_likelihood - a.log_likelihood - c).abs() < 1e-10);
        for t in 0..em.t_len {
            for j in 0..em.g {
                assert!((a.u_hat[t][j] - b.u_hat[t][j]).abs() < 1e-10);
            }
        }
        assert_eq!(viterbi(&params, &em).unwrap(), viterbi(&params, &shifted).unwrap());
    }

    #[test]
    fn viterbi_beats_random_paths() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (params, em) = random_instance(&mut rng, 3, 10);
        let joint = |path: &[usize]| {
            let mut lp = params.pi1[path[0]].ln() + em.get(0, path[0]);
            for t in 1..path.len() {
                lp += params.gamma[path[t - 1]][path[t]].ln() + em.get(t, path[t]);
            }
            lp
        };
        let best = viterbi(&params, &em).unwrap();
        let best_lp = joint(&best);
        for _ in 0..200 {
            let path: Vec<usize> = (0..em.t_len).map(|_| rng.gen_range(0..3)).collect();
            assert!(joint(&path) <= best_lp + 1e-12);
        }
    }

    #[test]
    fn posterior_path_sampling_matches_smoothed_marginals() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let (params, em) = random_instance(&mut rng, 2, 5);
        let post = forward_backward(&params, &em).unwrap();
        let n = 20_000;
        let mut freq = vec![vec![0.0f64; 2]; 5];
        for _ in 0..n {
            let path = sample_posterior_path(&params, &em, &mut rng).unwrap();
            for (t, &s) in path.iter().enumerate() {
                freq[t][s] += 1.0;
            }
        }
        for t in 0..5 {
            for j in 0..2 {
                let p = post.u_hat[t][j];
                let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-4);
                let obs = freq[t][j] / n as f64;
                assert!(
                    (obs - p).abs() < 4.0 * se,
                    "t={t} j={j}: sampled {obs} vs smoothed {p}"
                );
            }
        }
    }

    #[test]
    fn nan_emission_is_reported() {
        let params = HmmParams::new(vec![1.0], vec![vec![1.0]]).unwrap();
        let em = LogEmissionMatrix::from_rows(vec![vec![-1.0], vec![f64::NAN]]).unwrap();
        let err = forward_backward(&params, &em).unwrap_err().to_string();
        assert!(err.contains("period 1"), "{err}");
    }

    #[test]
    fn mixed_poisson_values() {
        let p = mixed_poisson_pmf(&[1.0], &[2.0], 0).unwrap();
        assert!((p - (-2.0f64).exp()).abs() < 1e-12);
        let p = mixed_poisson_pmf(&[0.5, 0.5], &[1.0, 2.0], 0).unwrap();
        assert!((p - 0.251_607_362_2).abs() < 1e-9);
        assert!(mixed_poisson_pmf(&[1.0], &[2.0], -1).is_err());
        // Normalization by truncation.
        let total: f64 = (0..200)
            .map(|n| mixed_poisson_pmf(&[0.3, 0.7], &[1.5, 6.0], n).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }
}
