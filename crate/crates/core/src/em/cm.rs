//! Two-step continuous-time pipeline: fit the (right-truncated) reporting
//! delay first, freeze it, build the per-period CDF integrals, then run EM
//! on the reported-claims Poisson-HMM whose state means are
//! `e_{i,t} lambda_j(x_i) * integral F`.

use crate::data::ObservedDataset;
use crate::delay::continuous::{
    delay_observations, fit_truncated_delay, report_probability_integrals, LogLogisticDelayModel,
    ReportProbabilityTable,
};
use crate::error::Result;
use crate::glm::{fit_weighted_poisson, DesignMatrix, PoissonLikelihood};
use crate::hmm::{forward_backward, LogEmissionMatrix, SmoothedPosteriors};
use crate::par;

use super::design::{lambda_matrix, log_pois, LnFactorial};
use super::init::{complete_window, intercept_theta, quantile_seed};
use super::{
    information_criteria, mstep_hmm, parameter_count, relative_distance, FitOptions, FitResult,
    ModelParams, ModelParamsCm,
};

struct CmCaches {
    freq_rows: DesignMatrix,
    lnf: LnFactorial,
    /// `ln(e_{i,t} * integral F)` per row `(i, t)`.
    offset: Vec<f64>,
}

fn build_caches(
    dataset: &ObservedDataset,
    table: &ReportProbabilityTable,
) -> Result<CmCaches> {
    let t_len = dataset.t_len();
    let mut rows = Vec::with_capacity(dataset.m() * t_len);
    let mut offset = Vec::with_capacity(dataset.m() * t_len);
    for i in 0..dataset.m() {
        for t in 0..t_len {
            rows.push(dataset.policy_design.row(i).to_vec());
            offset.push((dataset.exposure.get(i, t) * table.integral_days(i, t)).ln());
        }
    }
    let freq_rows = DesignMatrix::new(rows, dataset.policy_design.names.clone())?;
    let max_n = (0..dataset.m())
        .flat_map(|i| (0..t_len).map(move |t| dataset.runoff.n_reported(i, t)))
        .max()
        .unwrap_or(0) as usize;
    Ok(CmCaches { freq_rows, lnf: LnFactorial::up_to(max_n.max(64)), offset })
}

fn emissions(
    dataset: &ObservedDataset,
    lambda: &[Vec<f64>],
    table: &ReportProbabilityTable,
    lnf: &LnFactorial,
) -> Result<LogEmissionMatrix> {
    let g = lambda.len();
    LogEmissionMatrix::build(dataset.t_len(), g, |t| {
        (0..g)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..dataset.m() {
                    let e = dataset.exposure.get(i, t);
                    let n = dataset.runoff.n_reported(i, t) as u64;
                    if e == 0.0 && n == 0 {
                        continue;
                    }
                    acc += log_pois(n, e * lambda[j][i] * table.integral_days(i, t), lnf);
                }
                acc
            })
            .collect()
    })
}

pub(crate) struct CmEmOutcome {
    pub params: ModelParamsCm,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub posteriors: SmoothedPosteriors,
    pub warnings: Vec<String>,
}

fn run_cm_em(
    dataset: &ObservedDataset,
    table: &ReportProbabilityTable,
    init: ModelParamsCm,
    max_iterations: usize,
    threshold: f64,
) -> Result<CmEmOutcome> {
    let caches = build_caches(dataset, table)?;
    let t_len = dataset.t_len();
    let g = init.hmm.g();
    let n_rows = dataset.m() * t_len;
    let y: Vec<f64> = (0..n_rows)
        .map(|r| dataset.runoff.n_reported(r / t_len, r % t_len) as f64)
        .collect();

    let mut params = init;
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iterations {
        iterations += 1;
        let lambda = lambda_matrix(dataset, &params.theta);
        let em = emissions(dataset, &lambda, table, &caches.lnf)?;
        let posteriors = forward_backward(&params.hmm, &em)?;
        trace.push(posteriors.log_likelihood);

        let (hmm, hmm_warnings) = mstep_hmm(&posteriors.u_hat, &posteriors.v_hat);
        warnings.extend(hmm_warnings);

        let theta_fits = par::map_range(g, |j| -> Result<Vec<f64>> {
            let weights: Vec<f64> =
                (0..n_rows).map(|r| posteriors.u_hat[r % t_len][j]).collect();
            let total_w: f64 = weights
                .iter()
                .zip(&caches.offset)
                .filter(|(_, o)| o.is_finite())
                .map(|(w, _)| *w)
                .sum();
            if total_w < 1e-6 * t_len as f64 {
                return Ok(params.theta[j].clone());
            }
            let fit =
                fit_weighted_poisson(&caches.freq_rows, &y, &weights, &caches.offset)?;
            let lik = PoissonLikelihood {
                x: &caches.freq_rows,
                y: &y,
                weights: &weights,
                offset: &caches.offset,
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

        let new_params = ModelParamsCm { hmm, theta, delay: params.delay.clone() };
        let dist = relative_distance(
            &ModelParams::Cm(params.clone()),
            &ModelParams::Cm(new_params.clone()),
        )?;
        params = new_params;
        if dist < threshold {
            converged = true;
            break;
        }
    }

    let lambda = lambda_matrix(dataset, &params.theta);
    let em = emissions(dataset, &lambda, table, &caches.lnf)?;
    let posteriors = forward_backward(&params.hmm, &em)?;
    trace.push(posteriors.log_likelihood);

    Ok(CmEmOutcome { params, trace, iterations, converged, posteriors, warnings })
}

fn initialize_cm(
    dataset: &ObservedDataset,
    options: &FitOptions,
    delay: &LogLogisticDelayModel,
    table: &ReportProbabilityTable,
) -> Result<ModelParamsCm> {
    let window = complete_window(dataset)?;
    let (hmm, means) = quantile_seed(
        window.t_len(),
        options.g,
        |t| (0..window.m()).map(|i| window.runoff.n_reported(i, t) as f64).sum(),
        |t| {
            (0..window.m())
                .map(|i| window.exposure.get(i, t) * table.integral_days(i, t))
                .sum()
        },
    );
    let theta = intercept_theta(&means, dataset.policy_design.n_cols());
    let window_table = truncate_table(table, &window);
    let seed = ModelParamsCm { hmm, theta, delay: delay.clone() };
    let short = run_cm_em(
        &window,
        &window_table,
        seed,
        25,
        options.rel_distance_threshold.max(1e-3),
    )?;
    Ok(short.params)
}

fn truncate_table(
    table: &ReportProbabilityTable,
    window: &ObservedDataset,
) -> ReportProbabilityTable {
    // Rebuild a reduced table by copying the leading columns.
    let t_len = window.t_len();
    let mut values = Vec::with_capacity(table.m * t_len);
    for i in 0..table.m {
        for t in 0..t_len {
            values.push(table.mean_prob(i, t));
        }
    }
    let period_days = (0..t_len).map(|t| table.period_days(t)).collect();
    ReportProbabilityTable::from_parts(table.m, t_len, values, period_days)
}

fn finish(
    dataset: &ObservedDataset,
    outcome: CmEmOutcome,
) -> Result<FitResult> {
    let p_freq = dataset.policy_design.n_cols();
    let delay_params = outcome.params.delay.scale_coefficients.len() + 1;
    let k = parameter_count(outcome.params.hmm.g(), p_freq, delay_params);
    let loglik = *outcome.trace.last().unwrap();
    let (aic, bic) = information_criteria(loglik, k, dataset.m() * dataset.t_len());
    Ok(FitResult {
        params: ModelParams::Cm(outcome.params),
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

/// Full pipeline: fit the delay regression (step 1), build the report
/// probability table (step 2), then run the frequency EM (step 3).
pub fn fit_cm(dataset: &ObservedDataset, options: &FitOptions) -> Result<FitResult> {
    let observations =
        delay_observations(dataset, options.cm_delay_mode, options.cm_delay_features);
    let names = options
        .cm_delay_features
        .names(&dataset.policy_design.names);
    let delay =
        fit_truncated_delay(&observations, options.cm_delay_mode, options.cm_delay_features, names)?;
    fit_cm_with_delay(dataset, options, delay)
}

/// EM with an externally supplied (frozen) delay model.
pub fn fit_cm_with_delay(
    dataset: &ObservedDataset,
    options: &FitOptions,
    delay: LogLogisticDelayModel,
) -> Result<FitResult> {
    let table = report_probability_integrals(&delay, dataset, options.quadrature_refine);
    let init = initialize_cm(dataset, options, &delay, &table)?;
    let outcome = run_cm_em(
        dataset,
        &table,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

/// Warm-started fit reusing the frozen delay model inside `init`.
pub fn fit_cm_from(
    dataset: &ObservedDataset,
    options: &FitOptions,
    init: ModelParams,
) -> Result<FitResult> {
    let ModelParams::Cm(init) = init else {
        return Err(crate::error::Error::validation("expected continuous-model parameters"));
    };
    let table = report_probability_integrals(&init.delay, dataset, options.quadrature_refine);
    let outcome = run_cm_em(
        dataset,
        &table,
        init,
        options.max_iterations,
        options.rel_distance_threshold,
    )?;
    finish(dataset, outcome)
}

/// Emission matrix under fitted parameters (used by prediction).
pub fn build_emissions(
    dataset: &ObservedDataset,
    params: &ModelParamsCm,
    options: &FitOptions,
) -> Result<LogEmissionMatrix> {
    let table =
        report_probability_integrals(&params.delay, dataset, options.quadrature_refine);
    let caches = build_caches(dataset, &table)?;
    let lambda = lambda_matrix(dataset, &params.theta);
    emissions(dataset, &lambda, &table, &caches.lnf)
}
