//! EM for the discrete multinomial model: reported counts follow a
//! Poisson-HMM with state means `e_{i,t} lambda_j(x_i) p^r_{i,t}`, and lag
//! counts given totals are multinomial. The E-step augments censored cells
//! with their expected claim counts; the M-step is a closed-form HMM update
//! plus weighted Poisson and binomial quasi-likelihood regressions.

use crate::data::ObservedDataset;
use crate::delay::discrete::{multinomial_delay_loglik, q_to_p, ConditionalQVector, DelayProbVector};
use crate::error::Result;
use crate::glm::{
    fit_weighted_binomial, fit_weighted_poisson, BinomialLikelihood, DesignMatrix,
    PoissonLikelihood,
};
use crate::hmm::{forward_backward, LogEmissionMatrix, SmoothedPosteriors};
use crate::par;

use super::design::{
    build_delay_design, delay_row_index, lag_link, lambda_matrix, log_pois, LnFactorial,
};
use super::init::{complete_window, intercept_theta, quantile_seed};
use super::{
    information_criteria, mstep_hmm, parameter_count, relative_distance, FitOptions, FitResult,
    ModelParams, ModelParamsMm,
};

/// Everything the M-step needs from one E-step pass.
pub struct MmExpectations {
    pub posteriors: SmoothedPosteriors,
    /// Observed-data log-likelihood: HMM frequency part plus the truncated
    /// multinomial delay part.
    pub observed_loglik: f64,
    /// `n_hat[j][i*T + t]`: expected total claims given state j.
    pub n_hat: Vec<Vec<f64>>,
    /// `z_hat[i*T + t][d]`: expected lag counts (observed cells keep their
    /// counts; censored lags get their conditional expectation).
    pub z_hat: Vec<Vec<f64>>,
}

struct MmCaches {
    delay_design: DesignMatrix,
    freq_rows: DesignMatrix,
    lnf: LnFactorial,
}

fn build_caches(dataset: &ObservedDataset, options: &FitOptions) -> Result<MmCaches> {
    let t_len = dataset.t_len();
    let delay_design = build_delay_design(dataset, options.delay_time_features)?;
    let mut rows = Vec::with_capacity(dataset.m() * t_len);
    for i in 0..dataset.m() {
        for _ in 0..t_len {
            rows.push(dataset.policy_design.row(i).to_vec());
        }
    }
    let freq_rows = DesignMatrix::new(rows, dataset.policy_design.names.clone())?;
    let max_n = (0..dataset.m())
        .flat_map(|i| (0..t_len).map(move |t| dataset.runoff.n_reported(i, t)))
        .max()
        .unwrap_or(0) as usize;
    Ok(MmCaches { delay_design, freq_rows, lnf: LnFactorial::up_to(max_n.max(64)) })
}

/// Lag-probability vectors `p_t(x_i)` for every `(i, t)` row.
pub fn delay_prob_vectors(
    dataset: &ObservedDataset,
    params: &ModelParamsMm,
    options: &FitOptions,
) -> Result<Vec<DelayProbVector>> {
    let delay_design = build_delay_design(dataset, options.delay_time_features)?;
    Ok(prob_vectors(dataset, params, &delay_design, options))
}

fn prob_vectors(
    dataset: &ObservedDataset,
    params: &ModelParamsMm,
    delay_design: &DesignMatrix,
    options: &FitOptions,
) -> Vec<DelayProbVector> {
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let blocks = par::map_range(dataset.m(), |i| {
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row = delay_design.row(delay_row_index(t_len, i, t));
            let q: Vec<f64> = (1..=d_max)
                .map(|d| {
                    let eta: f64 =
                        row.iter().zip(&params.delta[d - 1]).map(|(x, b)| x * b).sum();
                    lag_link(d, options.link_d1).inverse(eta)
                })
                .collect();
            out.push(q_to_p(&ConditionalQVector(q)));
        }
        out
    });
    blocks.into_iter().flatten().collect()
}

fn emissions_from_probs(
    dataset: &ObservedDataset,
    lambda: &[Vec<f64>],
    probs: &[DelayProbVector],
    lnf: &LnFactorial,
) -> Result<LogEmissionMatrix> {
    let t_len = dataset.t_len();
    let g = lambda.len();
    LogEmissionMatrix::build(t_len, g, |t| {
        let window = dataset.runoff.observed_window(t);
        (0..g)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..dataset.m() {
                    let e = dataset.exposure.get(i, t);
                    let n = dataset.runoff.n_reported(i, t) as u64;
                    if e == 0.0 && n == 0 {
                        continue;
                    }
                    let pr = probs[i * t_len + t].reported_mass(window);
                    acc += log_pois(n, e * lambda[j][i] * pr, lnf);
                }
                acc
            })
            .collect()
    })
}

/// One E-step: smoothed posteriors, observed log-likelihood, and the
/// expected complete-data counts.
pub fn estep_expectations_mm(
    dataset: &ObservedDataset,
    params: &ModelParamsMm,
    options: &FitOptions,
) -> Result<MmExpectations> {
    let caches = build_caches(dataset, options)?;
    estep_inner(dataset, params, options, &caches)
}

fn estep_inner(
    dataset: &ObservedDataset,
    params: &ModelParamsMm,
    options: &FitOptions,
    caches: &MmCaches,
) -> Result<MmExpectations> {
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let g = params.hmm.g();
    let m = dataset.m();

    let lambda = lambda_matrix(dataset, &params.theta);
    let probs = prob_vectors(dataset, params, &caches.delay_design, options);
    let emissions = emissions_from_probs(dataset, &lambda, &probs, &caches.lnf)?;
    let posteriors = forward_backward(&params.hmm, &emissions)?;

    // Delay part of the observed log-likelihood (truncated multinomial).
    let delay_ll: f64 = par::map_range(m, |i| {
        let mut acc = 0.0;
        for t in 0..t_len {
            let window = dataset.runoff.observed_window(t);
            let z: Vec<u64> =
                dataset.runoff.z_slice(i, t).iter().map(|&v| v as u64).collect();
            acc += multinomial_delay_loglik(&z, &probs[i * t_len + t], window);
        }
        acc
    })
    .into_iter()
    .sum();

    // n_hat[j][(i,t)] = n^r + 1{censored} e lambda_j * tail mass.
    let n_hat: Vec<Vec<f64>> = (0..g)
        .map(|j| {
            par::map_range(m, |i| {
                let mut row = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let n = dataset.runoff.n_reported(i, t) as f64;
                    let window = dataset.runoff.observed_window(t);
                    let tail = if window < d_max {
                        let p = &probs[i * t_len + t];
                        let tail_mass: f64 = p.0[window + 1..].iter().sum();
                        dataset.exposure.get(i, t) * lambda[j][i] * tail_mass
                    } else {
                        0.0
                    };
                    row.push(n + tail);
                }
                row
            })
            .into_iter()
            .flatten()
            .collect()
        })
        .collect();

    // z_hat: observed counts, with censored lags replaced by expectations
    // mixed over the smoothed state posterior.
    let u_hat = &posteriors.u_hat;
    let z_hat: Vec<Vec<f64>> = par::map_range(m, |i| {
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let window = dataset.runoff.observed_window(t);
            let e = dataset.exposure.get(i, t);
            let p = &probs[i * t_len + t];
            let mixed_rate: f64 =
                (0..g).map(|j| u_hat[t][j] * e * lambda[j][i]).sum();
            let mut row = Vec::with_capacity(d_max + 1);
            for d in 0..=d_max {
                if d <= window {
                    row.push(dataset.runoff.z(i, t, d) as f64);
                } else {
                    row.push(mixed_rate * p.0[d]);
                }
            }
            rows.push(row);
        }
        rows
    })
    .into_iter()
    .flatten()
    .collect();

    Ok(MmExpectations {
        observed_loglik: posteriors.log_likelihood + delay_ll,
        posteriors,
        n_hat,
        z_hat,
    })
}

fn mstep(
    dataset: &ObservedDataset,
    expectations: &MmExpectations,
    previous: &ModelParamsMm,
    options: &FitOptions,
    caches: &MmCaches,
    warnings: &mut Vec<String>,
) -> Result<ModelParamsMm> {
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let g = previous.hmm.g();
    let n_rows = dataset.m() * t_len;

    let (hmm, hmm_warnings) =
        mstep_hmm(&expectations.posteriors.u_hat, &expectations.posteriors.v_hat);
    warnings.extend(hmm_warnings);

    // Frequency block: one weighted Poisson per state.
    let offset: Vec<f64> = (0..n_rows)
        .map(|r| {
            let (i, t) = (r / t_len, r % t_len);
            dataset.exposure.get(i, t).ln()
        })
        .collect();
    let theta_fits = par::map_range(g, |j| -> Result<Vec<f64>> {
        let weights: Vec<f64> = (0..n_rows)
            .map(|r| expectations.posteriors.u_hat[r % t_len][j])
            .collect();
        let total_w: f64 = weights
            .iter()
            .zip(&offset)
            .filter(|(_, o)| o.is_finite())
            .map(|(w, _)| *w)
            .sum();
        if total_w < 1e-6 * t_len as f64 {
            // Degenerate state: freeze its coefficients.
            return Ok(previous.theta[j].clone());
        }
        let fit = fit_weighted_poisson(
            &caches.freq_rows,
            &expectations.n_hat[j],
            &weights,
            &offset,
        )?;
        let lik = PoissonLikelihood {
            x: &caches.freq_rows,
            y: &expectations.n_hat[j],
            weights: &weights,
            offset: &offset,
        };
        // Generalized-EM guard: never move to a worse coefficient block.
        if lik.loglik(&fit.coefficients) >= lik.loglik(&previous.theta[j]) {
            Ok(fit.coefficients)
        } else {
            Ok(previous.theta[j].clone())
        }
    });
    let mut theta = Vec::with_capacity(g);
    for (j, fit) in theta_fits.into_iter().enumerate() {
        let coefficients = fit?;
        if coefficients == previous.theta[j]
            && expectations
                .posteriors
                .u_hat
                .iter()
                .map(|r| r[j])
                .sum::<f64>()
                < 1e-6 * t_len as f64
        {
            warnings.push(format!("state {j} posterior mass near zero; theta frozen"));
        }
        theta.push(coefficients);
    }

    // Delay block: one binomial regression per lag.
    let delta_fits = par::map_range(d_max, |di| -> Result<Vec<f64>> {
        let d = di + 1;
        let mut successes = Vec::with_capacity(n_rows);
        let mut trials = Vec::with_capacity(n_rows);
        for r in 0..n_rows {
            let z = &expectations.z_hat[r];
            let s = z[d];
            let cum: f64 = z[..=d].iter().sum();
            successes.push(s);
            trials.push(cum);
        }
        let link = lag_link(d, options.link_d1);
        let fit = fit_weighted_binomial(&caches.delay_design, &successes, &trials, link)?;
        let lik = BinomialLikelihood {
            x: &caches.delay_design,
            successes: &successes,
            trials: &trials,
            link,
        };
        if lik.loglik(&fit.coefficients) >= lik.loglik(&previous.delta[di]) {
            Ok(fit.coefficients)
        } else {
            Ok(previous.delta[di].clone())
        }
    });
    let mut delta = Vec::with_capacity(d_max);
    for fit in delta_fits {
        delta.push(fit?);
    }

    Ok(ModelParamsMm { hmm, theta, delta })
}

pub(crate) struct EmOutcome {
    pub params: ModelParamsMm,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub posteriors: SmoothedPosteriors,
    pub warnings: Vec<String>,
}

pub(crate) fn run_mm_em(
    dataset: &ObservedDataset,
    options: &FitOptions,
    init: ModelParamsMm,
    max_iterations: usize,
    threshold: f64,
) -> Result<EmOutcome> {
    let caches = build_caches(dataset, options)?;
    let mut params = init;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iterations {
        iterations += 1;
        let expectations = estep_inner(dataset, &params, options, &caches)?;
        trace.push(expectations.observed_loglik);
        let new_params =
            mstep(dataset, &expectations, &params, options, &caches, &mut warnings)?;
        let dist = relative_distance(
            &ModelParams::Mm(params.clone()),
            &ModelParams::Mm(new_params.clone()),
        )?;
        params = new_params;
        if dist < threshold {
            converged = true;
            break;
        }
    }

    // Final pass at the converged parameters.
    let expectations = estep_inner(dataset, &params, options, &caches)?;
    trace.push(expectations.observed_loglik);

    Ok(EmOutcome {
        params,
        trace,
        iterations,
        converged,
        posteriors: expectations.posteriors,
        warnings,
    })
}

/// Seed parameters from the completely observed window `t <= T - D`:
/// quantile-split state means plus direct delay regressions, refined by a
/// short EM run on that window.
pub fn initialize_mm(dataset: &ObservedDataset, options: &FitOptions) -> Result<ModelParamsMm> {
    let window = complete_window(dataset)?;
    let g = options.g;
    let (hmm, means) = quantile_seed(
        window.t_len(),
        g,
        |t| (0..window.m()).map(|i| window.runoff.n_reported(i, t) as f64).sum(),
        |t| (0..window.m()).map(|i| window.exposure.get(i, t)).sum(),
    );
    let theta = intercept_theta(&means, dataset.policy_design.n_cols());

    // Direct binomial fits on the (fully observed) window lags.
    let delay_design = build_delay_design(&window, options.delay_time_features)?;
    let t_len = window.t_len();
    let d_max = window.d_max();
    let n_rows = window.m() * t_len;
    let mut delta = Vec::with_capacity(d_max);
    for d in 1..=d_max {
        let mut successes = Vec::with_capacity(n_rows);
        let mut trials = Vec::with_capacity(n_rows);
        for i in 0..window.m() {
            for t in 0..t_len {
                let z = window.runoff.z_slice(i, t);
                successes.push(z[d] as f64);
                trials.push(z[..=d].iter().map(|&v| v as f64).sum());
            }
        }
        let fit = fit_weighted_binomial(
            &delay_design,
            &successes,
            &trials,
            lag_link(d, options.link_d1),
        )?;
        delta.push(fit.coefficients);
    }

    let seed = ModelParamsMm { hmm, theta, delta };
    let short = run_mm_em(
        &window,
        options,
        seed,
        25,
        options.rel_distance_threshold.max(1e-3),
    )?;
    Ok(short.params)
}

fn finish(dataset: &ObservedDataset, outcome: EmOutcome) -> Result<FitResult> {
    let p_freq = dataset.policy_design.n_cols();
    let p_delay = outcome.params.delta.first().map_or(0, |d| d.len());
    let k = parameter_count(outcome.params.hmm.g(), p_freq, dataset.d_max() * p_delay);
    let loglik = *outcome.trace.last().unwrap();
    let (aic, bic) = information_criteria(loglik, k, dataset.m() * dataset.t_len());
    Ok(FitResult {
        params: ModelParams::Mm(outcome.params),
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

pub fn fit_mm(dataset: &ObservedDataset, options: &FitOptions) -> Result<FitResult> {
    let init = initialize_mm(dataset, options)?;
    let outcome = run_mm_em(
        dataset,
        options,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

/// Fit from explicit starting parameters (warm starts, permutation checks).
pub fn fit_mm_from(
    dataset: &ObservedDataset,
    options: &FitOptions,
    init: ModelParams,
) -> Result<FitResult> {
    let ModelParams::Mm(init) = init else {
        return Err(crate::error::Error::validation("expected multinomial parameters"));
    };
    let outcome = run_mm_em(
        dataset,
        options,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

/// Emission matrix under fitted parameters (used by prediction).
pub fn build_emissions(
    dataset: &ObservedDataset,
    params: &ModelParamsMm,
    options: &FitOptions,
) -> Result<LogEmissionMatrix> {
    let caches = build_caches(dataset, options)?;
    let lambda = lambda_matrix(dataset, &params.theta);
    let probs = prob_vectors(dataset, params, &caches.delay_design, options);
    emissions_from_probs(dataset, &lambda, &probs, &caches.lnf)
}
