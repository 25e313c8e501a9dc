//! Monte-Carlo EM for the Dirichlet-multinomial model. Uncensored cells use
//! the conjugate Dirichlet posterior in closed form; censored cells draw
//! lag-probability vectors from the non-conjugate posterior by rejection
//! sampling, with per-(iteration, policy, period) RNG streams so results are
//! reproducible under any parallel schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use statrs::function::gamma::digamma;

use crate::data::ObservedDataset;
use crate::delay::discrete::{
    beta_binomial_loglik, sample_posterior, DirichletParams, PosteriorSpec,
};
use crate::error::Result;
use crate::glm::{
    fit_dirichlet_regression_logs, fit_weighted_poisson, DesignMatrix, DirichletLikelihood,
    PoissonLikelihood, PROB_CLIP,
};
use crate::hmm::{forward_backward, logsumexp_unchecked, LogEmissionMatrix, SmoothedPosteriors};
use crate::par;

use super::design::{
    build_delay_design, delay_row_index, lambda_matrix, log_pois, LnFactorial,
};
use super::init::{complete_window, intercept_theta, quantile_seed};
use super::{
    information_criteria, mstep_hmm, parameter_count, relative_distance, FitOptions, FitResult,
    ModelParams, ModelParamsDm,
};

/// Deterministic per-cell RNG stream.
pub(crate) fn cell_rng(seed: u64, parts: [u64; 3]) -> ChaCha12Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        s = splitmix64(s ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    }
    ChaCha12Rng::seed_from_u64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-cell E-step output.
struct CellExpectation {
    /// Expected log lag probabilities (length D+1).
    e_log_p: Vec<f64>,
    /// Per-state log emission `log P(N^r = n^r | C_t = j)`; empty for
    /// uncensored cells (computed directly from the Poisson pmf).
    log_emission: Vec<f64>,
    /// Per-state expected censored-tail probability mass `E[sum_{d>T-t} p_d | C_t=j]`;
    /// empty for uncensored cells.
    tail: Vec<f64>,
}

struct DmCaches {
    delay_design: DesignMatrix,
    freq_rows: DesignMatrix,
    freq_offset: Vec<f64>,
    lnf: LnFactorial,
}

fn build_caches(dataset: &ObservedDataset, options: &FitOptions) -> Result<DmCaches> {
    let t_len = dataset.t_len();
    let delay_design = build_delay_design(dataset, options.delay_time_features)?;
    let mut rows = Vec::with_capacity(dataset.m() * t_len);
    let mut freq_offset = Vec::with_capacity(dataset.m() * t_len);
    for i in 0..dataset.m() {
        for t in 0..t_len {
            rows.push(dataset.policy_design.row(i).to_vec());
            freq_offset.push(dataset.exposure.get(i, t).ln());
        }
    }
    let freq_rows = DesignMatrix::new(rows, dataset.policy_design.names.clone())?;
    let max_n = (0..dataset.m())
        .flat_map(|i| (0..t_len).map(move |t| dataset.runoff.n_reported(i, t)))
        .max()
        .unwrap_or(0) as usize;
    Ok(DmCaches { delay_design, freq_rows, freq_offset, lnf: LnFactorial::up_to(max_n.max(64)) })
}

/// Dirichlet parameters per `(i, t)` row.
pub fn eta_table(
    dataset: &ObservedDataset,
    params: &ModelParamsDm,
    options: &FitOptions,
) -> Result<Vec<Vec<f64>>> {
    let delay_design = build_delay_design(dataset, options.delay_time_features)?;
    Ok(eta_rows(dataset, params, &delay_design))
}

fn eta_rows(
    dataset: &ObservedDataset,
    params: &ModelParamsDm,
    delay_design: &DesignMatrix,
) -> Vec<Vec<f64>> {
    let t_len = dataset.t_len();
    par::map_range(dataset.m(), |i| {
        (0..t_len)
            .map(|t| {
                let row = delay_design.row(delay_row_index(t_len, i, t));
                params
                    .eta_coefficients
                    .iter()
                    .map(|beta| {
                        let lin: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
                        lin.exp().clamp(1e-8, 1e8)
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<Vec<f64>>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Conjugate closed form for a fully observed cell:
/// `E[log p_d] = psi(eta_d + z_d) - psi(sum(eta + z))`.
fn conjugate_e_log_p(eta: &[f64], z: &[u32]) -> Vec<f64> {
    let total: f64 =
        eta.iter().zip(z).map(|(&e, &c)| e + c as f64).sum();
    let dig_total = digamma(total);
    eta.iter()
        .zip(z)
        .map(|(&e, &c)| digamma(e + c as f64) - dig_total)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn estep_cells(
    dataset: &ObservedDataset,
    lambda: &[Vec<f64>],
    etas: &[Vec<f64>],
    mixing: &[Vec<f64>],
    iteration: u64,
    mc_samples: usize,
    seed: u64,
    lnf: &LnFactorial,
) -> Result<Vec<CellExpectation>> {
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let g = lambda.len();

    let blocks = par::map_range(dataset.m(), |i| -> Result<Vec<CellExpectation>> {
        let mut cells = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let window = dataset.runoff.observed_window(t);
            let idx = i * t_len + t;
            let z = dataset.runoff.z_slice(i, t);
            if window == d_max {
                cells.push(CellExpectation {
                    e_log_p: conjugate_e_log_p(&etas[idx], z),
                    log_emission: Vec::new(),
                    tail: Vec::new(),
                });
                continue;
            }
            let e = dataset.exposure.get(i, t);
            let n_r = dataset.runoff.n_reported(i, t) as u64;
            let state_means: Vec<f64> = (0..g).map(|j| e * lambda[j][i]).collect();
            let spec = PosteriorSpec {
                eta: DirichletParams(etas[idx].clone()),
                observed_z: z[..=window].iter().map(|&v| v as u64).collect(),
                n_reported: n_r,
                mixing: mixing[t].clone(),
                state_means: state_means.clone(),
                split: window,
            };
            let mut rng = cell_rng(seed, [iteration, i as u64, t as u64]);
            let sample = sample_posterior(&spec, mc_samples, &mut rng)?;
            let draws = &sample.draws;
            let s = draws.len() as f64;

            let mut e_log_p = vec![0.0; d_max + 1];
            for p in draws {
                for (acc, &pd) in e_log_p.iter_mut().zip(&p.0) {
                    *acc += pd.max(PROB_CLIP).ln();
                }
            }
            e_log_p.iter_mut().for_each(|v| *v /= s);

            // Per-state emission (MC average of the thinned Poisson pmf) and
            // state-conditional tail expectation via self-normalized
            // reweighting of the shared draw set.
            let mut log_emission = Vec::with_capacity(g);
            let mut tail = Vec::with_capacity(g);
            let prs: Vec<f64> =
                draws.iter().map(|p| p.reported_mass(window)).collect();
            let tails: Vec<f64> =
                draws.iter().map(|p| p.0[window + 1..].iter().sum()).collect();
            let log_gs: Vec<f64> = prs.iter().map(|&pr| spec.log_g(pr)).collect();
            for j in 0..g {
                let lam = state_means[j];
                let lp: Vec<f64> = prs
                    .iter()
                    .map(|&pr| log_pois(n_r, lam * pr, lnf))
                    .collect();
                log_emission.push(logsumexp_unchecked(&lp) - s.ln());

                let lw: Vec<f64> = prs
                    .iter()
                    .zip(&log_gs)
                    .map(|(&pr, &lg)| -lam * pr - lg)
                    .collect();
                let lw_max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut wsum = 0.0;
                let mut wx = 0.0;
                for (l, &tl) in lw.iter().zip(&tails) {
                    let w = (l - lw_max).exp();
                    wsum += w;
                    wx += w * tl;
                }
                tail.push(if wsum > 0.0 { wx / wsum } else { 0.0 });
            }
            cells.push(CellExpectation { e_log_p, log_emission, tail });
        }
        Ok(cells)
    });

    let mut out = Vec::with_capacity(dataset.m() * t_len);
    for block in blocks {
        out.extend(block?);
    }
    Ok(out)
}

fn emissions_from_cells(
    dataset: &ObservedDataset,
    lambda: &[Vec<f64>],
    cells: &[CellExpectation],
    lnf: &LnFactorial,
) -> Result<LogEmissionMatrix> {
    let t_len = dataset.t_len();
    let g = lambda.len();
    let d_max = dataset.d_max();
    LogEmissionMatrix::build(t_len, g, |t| {
        let censored = dataset.runoff.observed_window(t) < d_max;
        (0..g)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..dataset.m() {
                    let e = dataset.exposure.get(i, t);
                    let n = dataset.runoff.n_reported(i, t) as u64;
                    if censored {
                        acc += cells[i * t_len + t].log_emission[j];
                    } else {
                        if e == 0.0 && n == 0 {
                            continue;
                        }
                        acc += log_pois(n, e * lambda[j][i], lnf);
                    }
                }
                acc
            })
            .collect()
    })
}

/// Observed beta-binomial delay log-likelihood over the observed lags.
fn observed_delay_loglik(dataset: &ObservedDataset, etas: &[Vec<f64>]) -> Result<f64> {
    let t_len = dataset.t_len();
    let results = par::map_range(dataset.m(), |i| -> Result<f64> {
        let mut acc = 0.0;
        for t in 0..t_len {
            let window = dataset.runoff.observed_window(t);
            let z = dataset.runoff.z_slice(i, t);
            let eta = DirichletParams(etas[i * t_len + t].clone());
            let mut cum = z[0] as u64;
            for d in 1..=window {
                acc += beta_binomial_loglik(z[d] as u64, cum, &eta, d)?;
                cum += z[d] as u64;
            }
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total)
}

pub(crate) struct DmEmOutcome {
    pub params: ModelParamsDm,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub posteriors: SmoothedPosteriors,
    pub warnings: Vec<String>,
}

pub(crate) fn run_dm_em(
    dataset: &ObservedDataset,
    options: &FitOptions,
    init: ModelParamsDm,
    max_iterations: usize,
    threshold: f64,
) -> Result<DmEmOutcome> {
    let caches = build_caches(dataset, options)?;
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let m = dataset.m();

    let mut params = init;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    // First iteration mixes states by their marginal distribution; later
    // ones reuse the previous smoothed posteriors.
    let mut mixing: Vec<Vec<f64>> = params.hmm.marginal_states(t_len);

    let mut iter_u64 = 0u64;
    let mut mc = options.mc_samples;
    while iterations < max_iterations {
        iter_u64 += 1;
        iterations += 1;
        let g = params.hmm.g();
        mc = match options.mc_double_after {
            Some(k) if iterations > k => options.mc_samples * 2,
            _ => options.mc_samples,
        };
        let lambda = lambda_matrix(dataset, &params.theta);
        let etas = eta_rows(dataset, &params, &caches.delay_design);
        let cells = estep_cells(
            dataset,
            &lambda,
            &etas,
            &mixing,
            iter_u64,
            mc,
            options.seed,
            &caches.lnf,
        )?;
        let em = emissions_from_cells(dataset, &lambda, &cells, &caches.lnf)?;
        let posteriors = forward_backward(&params.hmm, &em)?;
        trace.push(posteriors.log_likelihood + observed_delay_loglik(dataset, &etas)?);
        mixing = posteriors.u_hat.clone();

        // M-step.
        let (hmm, hmm_warnings) = mstep_hmm(&posteriors.u_hat, &posteriors.v_hat);
        warnings.extend(hmm_warnings);

        let theta_fits = par::map_range(g, |j| -> Result<Vec<f64>> {
            let mut y = Vec::with_capacity(m * t_len);
            let mut weights = Vec::with_capacity(m * t_len);
            for i in 0..m {
                for t in 0..t_len {
                    let idx = i * t_len + t;
                    let n_r = dataset.runoff.n_reported(i, t) as f64;
                    let cell = &cells[idx];
                    let n_hat = if cell.tail.is_empty() {
                        n_r
                    } else {
                        n_r + dataset.exposure.get(i, t) * lambda[j][i] * cell.tail[j]
                    };
                    y.push(n_hat);
                    weights.push(posteriors.u_hat[t][j]);
                }
            }
            let total_w: f64 = weights
                .iter()
                .zip(&caches.freq_offset)
                .filter(|(_, o)| o.is_finite())
                .map(|(w, _)| *w)
                .sum();
            if total_w < 1e-6 * t_len as f64 {
                return Ok(params.theta[j].clone());
            }
            let fit =
                fit_weighted_poisson(&caches.freq_rows, &y, &weights, &caches.freq_offset)?;
            let lik = PoissonLikelihood {
                x: &caches.freq_rows,
                y: &y,
                weights: &weights,
                offset: &caches.freq_offset,
            };
            if lik.loglik(&fit.coefficients) >= lik.loglik(&params.theta[j]) {
                Ok(fit.coefficients)
            } else {
                Ok(params.theta[j].clone())
            }
        });
        let mut theta = Vec::with_capacity(g);
        for fit in theta_fits {
            theta.push(fit?);
        }

        // Delay block: Dirichlet regression on the exact expected log
        // probabilities (the expected complete-data term is linear in them,
        // and their spread keeps concentration estimates finite on cells
        // with little data). With D = 0 there is nothing to fit.
        let eta_coefficients = if d_max == 0 {
            params.eta_coefficients.clone()
        } else {
            let e_log_rows: Vec<Vec<f64>> =
                cells.iter().map(|c| c.e_log_p.clone()).collect();
            let unit_weights = vec![1.0; m * t_len];
            let dir_fit = fit_dirichlet_regression_logs(
                &caches.delay_design,
                e_log_rows.clone(),
                &unit_weights,
                Some(&params.eta_coefficients),
            )?;
            let lik = DirichletLikelihood {
                x: &caches.delay_design,
                log_p: e_log_rows,
                weights: &unit_weights,
                n_components: d_max + 1,
            };
            let flat_new: Vec<f64> =
                dir_fit.coefficients.iter().flatten().copied().collect();
            let flat_old: Vec<f64> =
                params.eta_coefficients.iter().flatten().copied().collect();
            let v_new = lik.value_grad(&flat_new).map(|(v, _)| v).unwrap_or(f64::NEG_INFINITY);
            let v_old = lik.value_grad(&flat_old).map(|(v, _)| v).unwrap_or(f64::NEG_INFINITY);
            if v_new >= v_old {
                dir_fit.coefficients
            } else {
                params.eta_coefficients.clone()
            }
        };

        let new_params = ModelParamsDm { hmm, theta, eta_coefficients };
        let dist = relative_distance(
            &ModelParams::Dm(params.clone()),
            &ModelParams::Dm(new_params.clone()),
        )?;
        params = new_params;
        if dist < threshold {
            converged = true;
            break;
        }
    }

    // Final evaluation pass at the settled parameters.
    let lambda = lambda_matrix(dataset, &params.theta);
    let etas = eta_rows(dataset, &params, &caches.delay_design);
    let cells = estep_cells(
        dataset,
        &lambda,
        &etas,
        &mixing,
        iter_u64 + 1,
        mc,
        options.seed,
        &caches.lnf,
    )?;
    let em = emissions_from_cells(dataset, &lambda, &cells, &caches.lnf)?;
    let posteriors = forward_backward(&params.hmm, &em)?;
    trace.push(posteriors.log_likelihood + observed_delay_loglik(dataset, &etas)?);

    Ok(DmEmOutcome { params, trace, iterations, converged, posteriors, warnings })
}

/// Initialization on the fully observed window: quantile-seeded HMM and
/// frequency intercepts; Dirichlet coefficients from a regression on the
/// window's conjugate posterior means, refined by a short EM run.
pub fn initialize_dm(dataset: &ObservedDataset, options: &FitOptions) -> Result<ModelParamsDm> {
    let window = complete_window(dataset)?;
    let g = options.g;
    let (hmm, means) = quantile_seed(
        window.t_len(),
        g,
        |t| (0..window.m()).map(|i| window.runoff.n_reported(i, t) as f64).sum(),
        |t| (0..window.m()).map(|i| window.exposure.get(i, t)).sum(),
    );
    let theta = intercept_theta(&means, dataset.policy_design.n_cols());

    // Seed the eta regression from per-cell conjugate expected logs under a
    // weak uniform prior.
    let d_max = window.d_max();
    let t_len = window.t_len();
    let delay_design = build_delay_design(&window, options.delay_time_features)?;
    let eta_coefficients = if d_max == 0 {
        vec![vec![0.0; delay_design.n_cols()]]
    } else {
        let mut e_log_rows = Vec::with_capacity(window.m() * t_len);
        for i in 0..window.m() {
            for t in 0..t_len {
                let z = window.runoff.z_slice(i, t);
                let prior = vec![0.5; d_max + 1];
                e_log_rows.push(conjugate_e_log_p(&prior, z));
            }
        }
        let weights = vec![1.0; e_log_rows.len()];
        fit_dirichlet_regression_logs(&delay_design, e_log_rows, &weights, None)?.coefficients
    };

    let seed = ModelParamsDm { hmm, theta, eta_coefficients };
    // The window has no censored cells, so these iterations are conjugate
    // and cheap; run enough of them that the expensive sampled phase starts
    // near the optimum.
    let short = run_dm_em(
        &window,
        options,
        seed,
        100,
        options.rel_distance_threshold.max(1e-3),
    )?;
    Ok(short.params)
}

fn finish(
    dataset: &ObservedDataset,
    outcome: DmEmOutcome,
) -> Result<FitResult> {
    let p_freq = dataset.policy_design.n_cols();
    let p_delay = outcome
        .params
        .eta_coefficients
        .first()
        .map_or(0, |d| d.len());
    let k = parameter_count(
        outcome.params.hmm.g(),
        p_freq,
        (dataset.d_max() + 1) * p_delay,
    );
    let loglik = *outcome.trace.last().unwrap();
    let (aic, bic) = information_criteria(loglik, k, dataset.m() * dataset.t_len());
    Ok(FitResult {
        params: ModelParams::Dm(outcome.params),
        loglik_trace: outcome.trace,
        iterations: outcome.iterations,
        converged: outcome.converged,
        n_parameters: k,
        aic,
        bic,
        posteriors: outcome.posteriors,
        warnings: outcome.warnings,
    })
}

pub fn fit_dm(dataset: &ObservedDataset, options: &FitOptions) -> Result<FitResult> {
    let init = initialize_dm(dataset, options)?;
    let outcome = run_dm_em(
        dataset,
        options,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

pub fn fit_dm_from(
    dataset: &ObservedDataset,
    options: &FitOptions,
    init: ModelParams,
) -> Result<FitResult> {
    let ModelParams::Dm(init) = init else {
        return Err(crate::error::Error::validation(
            "expected Dirichlet-multinomial parameters",
        ));
    };
    let outcome = run_dm_em(
        dataset,
        options,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

/// Observed-data log-likelihood at fixed parameters: the HMM frequency part
/// (censored-period emissions by Monte Carlo) plus the beta-binomial delay
/// part over observed lags.
pub fn observed_loglik(
    dataset: &ObservedDataset,
    params: &ModelParamsDm,
    options: &FitOptions,
) -> Result<f64> {
    let caches = build_caches(dataset, options)?;
    let etas = eta_rows(dataset, params, &caches.delay_design);
    let em = build_emissions(dataset, params, options)?;
    let posteriors = forward_backward(&params.hmm, &em)?;
    Ok(posteriors.log_likelihood + observed_delay_loglik(dataset, &etas)?)
}

/// Emission matrix under fitted parameters for prediction. Censored-period
/// emissions are Monte-Carlo integrals over the cell posteriors, mixed by
/// the marginal state distribution (deterministic given the seed).
pub fn build_emissions(
    dataset: &ObservedDataset,
    params: &ModelParamsDm,
    options: &FitOptions,
) -> Result<LogEmissionMatrix> {
    let caches = build_caches(dataset, options)?;
    let lambda = lambda_matrix(dataset, &params.theta);
    let etas = eta_rows(dataset, params, &caches.delay_design);
    let mixing = params.hmm.marginal_states(dataset.t_len());
    let cells = estep_cells(
        dataset,
        &lambda,
        &etas,
        &mixing,
        u64::MAX,
        options.mc_samples,
        options.seed,
        &caches.lnf,
    )?;
    emissions_from_cells(dataset, &lambda, &cells, &caches.lnf)
}
