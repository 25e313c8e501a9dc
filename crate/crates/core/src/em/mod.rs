//! The three estimation pipelines: CM (two-step continuous), MM (EM),
//! and DM (Monte-Carlo EM), plus initialization, convergence, and
//! backward model selection over the number of hidden states.

use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::delay::continuous::{DelayFeatureSpec, LogLogisticDelayModel, TruncationMode};
use crate::error::{Error, Result};
use crate::glm::Link;
use crate::hmm::{HmmParams, SmoothedPosteriors};

pub mod cm;
mod design;
pub mod dm;
mod init;
pub mod mm;

pub use design::{build_delay_design, DelayTimeFeatures};

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub g: usize,
    /// Stop when the summed relative parameter change drops below this.
    pub rel_distance_threshold: f64,
    pub max_iterations: usize,
    /// Monte-Carlo draws per censored cell in the DM E-step.
    pub mc_samples: usize,
    /// Double `mc_samples` once this iteration is reached (variance control).
    pub mc_double_after: Option<usize>,
    pub seed: u64,
    /// Link for the lag-1 conditional reporting probability; later lags use
    /// the complementary log-log link.
    pub link_d1: Link,
    /// Occurrence-time dummies entering the discrete delay regressions.
    pub delay_time_features: DelayTimeFeatures,
    /// Occurrence-time dummies entering the continuous delay-scale regression.
    pub cm_delay_features: DelayFeatureSpec,
    pub cm_delay_mode: TruncationMode,
    /// Sub-day quadrature points per day for the CM report-probability table.
    pub quadrature_refine: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            g: 2,
            rel_distance_threshold: 1e-4,
            max_iterations: 200,
            mc_samples: 200,
            mc_double_after: None,
            seed: 0,
            link_d1: Link::Logit,
            delay_time_features: DelayTimeFeatures::None,
            cm_delay_features: DelayFeatureSpec::default(),
            cm_delay_mode: TruncationMode::Truncated,
            quadrature_refine: 1,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::validation("need at least one state"));
        }
        if self.rel_distance_threshold.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::validation("relative-distance threshold must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Multinomial-model parameters: HMM, frequency coefficients (one vector per
/// state), and per-lag conditional-probability regressions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParamsMm {
    pub hmm: HmmParams,
    pub theta: Vec<Vec<f64>>,
    /// `delta[d-1]` drives `q(d; x)` for lags `d = 1..=D`.
    pub delta: Vec<Vec<f64>>,
}

/// Dirichlet-multinomial parameters: the delay block maps covariates to
/// `log eta_d`, one coefficient vector per lag component `0..=D`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParamsDm {
    pub hmm: HmmParams,
    pub theta: Vec<Vec<f64>>,
    pub eta_coefficients: Vec<Vec<f64>>,
}

/// Continuous-model parameters; the delay model is fitted in step one and
/// frozen during the EM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParamsCm {
    pub hmm: HmmParams,
    pub theta: Vec<Vec<f64>>,
    pub delay: LogLogisticDelayModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelParams {
    Mm(ModelParamsMm),
    Dm(ModelParamsDm),
    Cm(ModelParamsCm),
}

impl ModelParams {
    pub fn hmm(&self) -> &HmmParams {
        match self {
            ModelParams::Mm(p) => &p.hmm,
            ModelParams::Dm(p) => &p.hmm,
            ModelParams::Cm(p) => &p.hmm,
        }
    }

    pub fn theta(&self) -> &[Vec<f64>] {
        match self {
            ModelParams::Mm(p) => &p.theta,
            ModelParams::Dm(p) => &p.theta,
            ModelParams::Cm(p) => &p.theta,
        }
    }

    pub fn g(&self) -> usize {
        self.hmm().g()
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelParams::Mm(_) => "mm",
            ModelParams::Dm(_) => "dm",
            ModelParams::Cm(_) => "cm",
        }
    }

    /// Canonical flattening: pi1, Gamma (row-major), theta by state, then the
    /// family's delay coefficients.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let hmm = self.hmm();
        out.extend(&hmm.pi1);
        for row in &hmm.gamma {
            out.extend(row);
        }
        for t in self.theta() {
            out.extend(t);
        }
        match self {
            ModelParams::Mm(p) => {
                for d in &p.delta {
                    out.extend(d);
                }
            }
            ModelParams::Dm(p) => {
                for d in &p.eta_coefficients {
                    out.extend(d);
                }
            }
            ModelParams::Cm(p) => {
                out.extend(&p.delay.scale_coefficients);
                out.push(p.delay.shape);
            }
        }
        out
    }

    /// Portfolio-average state intensity, the sort key used to report states
    /// in a label-switching-proof order.
    pub fn mean_intensities(&self, dataset: &ObservedDataset) -> Vec<f64> {
        let design = &dataset.policy_design;
        self.theta()
            .iter()
            .map(|theta| {
                let s: f64 = (0..design.n_rows())
                    .map(|i| design.dot(i, theta).exp())
                    .sum();
                s / design.n_rows() as f64
            })
            .collect()
    }
}

/// Summed relative parameter change; entries with `|old| < 1e-12` contribute
/// the absolute change instead.
pub fn relative_distance(old: &ModelParams, new: &ModelParams) -> Result<f64> {
    let a = old.flatten();
    let b = new.flatten();
    if a.len() != b.len() || std::mem::discriminant(old) != std::mem::discriminant(new) {
        return Err(Error::validation("parameter shapes differ"));
    }
    Ok(a.iter()
        .zip(&b)
        .map(|(&o, &n)| {
            let diff = (o - n).abs();
            if o.abs() < 1e-12 {
                diff
            } else {
                diff / o.abs()
            }
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Fit result
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Observed log-likelihood at the start of each iteration plus the final
    /// value; for DM the censored-period emissions are Monte-Carlo estimates.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_parameters: usize,
    pub aic: f64,
    pub bic: f64,
    pub posteriors: SmoothedPosteriors,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap()
    }
}

/// Free-parameter count: (g-1) initial probabilities, g(g-1) transitions,
/// g * p_freq frequency coefficients, plus the family's delay parameters.
pub fn parameter_count(g: usize, p_freq: usize, delay_params: usize) -> usize {
    (g - 1) + g * (g - 1) + g * p_freq + delay_params
}

pub fn information_criteria(loglik: f64, k: usize, n_obs: usize) -> (f64, f64) {
    let aic = -2.0 * loglik + 2.0 * k as f64;
    let bic = -2.0 * loglik + k as f64 * (n_obs as f64).ln();
    (aic, bic)
}

// ---------------------------------------------------------------------------
// HMM M-step
// ---------------------------------------------------------------------------

/// Closed-form update of the initial distribution and transition matrix.
/// A state with no transition mass falls back to a uniform row (reported as
/// a warning string).
pub fn mstep_hmm(
    u_hat: &[Vec<f64>],
    v_hat: &[Vec<Vec<f64>>],
) -> (HmmParams, Vec<String>) {
    let g = u_hat[0].len();
    let pi1 = u_hat[0].clone();
    let mut warnings = Vec::new();
    let mut gamma = vec![vec![0.0; g]; g];
    for j in 0..g {
        let mut row = vec![0.0; g];
        for slice in v_hat {
            for (k, r) in row.iter_mut().enumerate() {
                *r += slice[j][k];
            }
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            warnings.push(format!("state {j} has no transition mass; uniform row"));
            gamma[j] = vec![1.0 / g as f64; g];
        } else {
            gamma[j] = row.iter().map(|&v| v / total).collect();
        }
    }
    (HmmParams { pi1, gamma }, warnings)
}

// ---------------------------------------------------------------------------
// Serialized artifact
// ---------------------------------------------------------------------------

/// JSON-serializable fitted model: parameters with covariate names, the
/// options used, and the likelihood trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub family: String,
    pub g: usize,
    pub d_max: usize,
    pub params: ModelParams,
    pub frequency_names: Vec<String>,
    pub delay_names: Vec<String>,
    pub options: FitOptions,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_parameters: usize,
    pub aic: f64,
    pub bic: f64,
    pub warnings: Vec<String>,
}

impl ModelArtifact {
    pub fn from_fit(fit: &FitResult, dataset: &ObservedDataset, options: &FitOptions) -> Self {
        let delay_names = match &fit.params {
            ModelParams::Cm(p) => p.delay.feature_names.clone(),
            _ => design::delay_design_names(dataset, options.delay_time_features),
        };
        Self {
            family: fit.params.family_name().to_string(),
            g: fit.params.g(),
            d_max: dataset.d_max(),
            params: fit.params.clone(),
            frequency_names: dataset.policy_design.names.clone(),
            delay_names,
            options: options.clone(),
            loglik_trace: fit.loglik_trace.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            n_parameters: fit.n_parameters,
            aic: fit.aic,
            bic: fit.bic,
            warnings: fit.warnings.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fit dispatch and model selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Mm,
    Dm,
    Cm,
}

pub fn fit(dataset: &ObservedDataset, family: ModelFamily, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    match family {
        ModelFamily::Mm => mm::fit_mm(dataset, options),
        ModelFamily::Dm => dm::fit_dm(dataset, options),
        ModelFamily::Cm => cm::fit_cm(dataset, options),
    }
}

#[derive(Debug)]
pub struct GSelection {
    /// Fits in the order visited (g_max first, then g_max-1, ...).
    pub fits: Vec<FitResult>,
    pub chosen_g: usize,
    /// Index of the chosen fit within `fits`.
    pub chosen_index: usize,
}

/// Backward model selection: fit at `g_max`, then repeatedly delete the state
/// with the smallest stationary weight, renormalize pi1/Gamma as a warm
/// start, and refit, stopping once the criterion stops decreasing.
pub fn select_g(
    dataset: &ObservedDataset,
    family: ModelFamily,
    g_max: usize,
    criterion: Criterion,
    options: &FitOptions,
) -> Result<GSelection> {
    if g_max < 2 {
        return Err(Error::validation("g_max must be at least 2"));
    }
    let score = |fit: &FitResult| match criterion {
        Criterion::Aic => fit.aic,
        Criterion::Bic => fit.bic,
    };

    let mut opts = options.clone();
    opts.g = g_max;
    let mut fits = vec![fit(dataset, family, &opts)?];
    let mut best_index = 0usize;

    while fits.last().unwrap().params.g() > 1 {
        let current = fits.last().unwrap();
        let warm = shrink_params(&current.params)?;
        opts.g = warm.g();
        let next = match family {
            ModelFamily::Mm => mm::fit_mm_from(dataset, &opts, warm)?,
            ModelFamily::Dm => dm::fit_dm_from(dataset, &opts, warm)?,
            ModelFamily::Cm => cm::fit_cm_from(dataset, &opts, warm)?,
        };
        let stop = score(&next) >= score(&fits[best_index]);
        fits.push(next);
        if stop {
            break;
        }
        best_index = fits.len() - 1;
    }

    Ok(GSelection {
        chosen_g: fits[best_index].params.g(),
        chosen_index: best_index,
        fits,
    })
}

/// Remove the state with the smallest stationary weight and renormalize.
fn shrink_params(params: &ModelParams) -> Result<ModelParams> {
    let hmm = params.hmm();
    let g = hmm.g();
    if g < 2 {
        return Err(Error::validation("cannot delete a state from a single-state model"));
    }
    let stationary = hmm.stationary();
    let drop = stationary
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(j, _)| j)
        .unwrap();

    let keep: Vec<usize> = (0..g).filter(|&j| j != drop).collect();
    let mut pi1: Vec<f64> = keep.iter().map(|&j| hmm.pi1[j]).collect();
    let s: f64 = pi1.iter().sum();
    if s > 0.0 {
        pi1.iter_mut().for_each(|p| *p /= s);
    } else {
        pi1 = vec![1.0 / keep.len() as f64; keep.len()];
    }
    let mut gamma = Vec::with_capacity(keep.len());
    for &j in &keep {
        let mut row: Vec<f64> = keep.iter().map(|&k| hmm.gamma[j][k]).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row = vec![1.0 / keep.len() as f64; keep.len()];
        }
        gamma.push(row);
    }
    let hmm = HmmParams { pi1, gamma };
    let theta: Vec<Vec<f64>> = keep.iter().map(|&j| params.theta()[j].clone()).collect();

    Ok(match params {
        ModelParams::Mm(p) => {
            ModelParams::Mm(ModelParamsMm { hmm, theta, delta: p.delta.clone() })
        }
        ModelParams::Dm(p) => ModelParams::Dm(ModelParamsDm {
            hmm,
            theta,
            eta_coefficients: p.eta_coefficients.clone(),
        }),
        ModelParams::Cm(p) => {
            ModelParams::Cm(ModelParamsCm { hmm, theta, delay: p.delay.clone() })
        }
    })
}

// ---------------------------------------------------------------------------
