//! Log-logistic reporting-delay regression (accelerated-failure-time form:
//! covariates act on the log scale, one global shape), right-truncated
//! fitting, and the per-period CDF integrals the continuous-time model needs.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};
use crate::par;

/// Which occurrence-time dummies enter the delay-scale regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayFeatureSpec {
    pub month: bool,
    pub weekday: bool,
}

impl Default for DelayFeatureSpec {
    fn default() -> Self {
        Self { month: true, weekday: true }
    }
}

impl DelayFeatureSpec {
    pub fn names(&self, policy_names: &[String]) -> Vec<String> {
        let mut names: Vec<String> = policy_names.to_vec();
        if self.month {
            for m in 2..=12 {
                names.push(format!("occ_month={m}"));
            }
        }
        if self.weekday {
            for wd in 1..=6 {
                names.push(format!("occ_weekday={wd}"));
            }
        }
        names
    }

    /// Feature row: the policy design row (with its intercept) followed by
    /// the occurrence-time dummies.
    pub fn encode(&self, policy_row: &[f64], date: NaiveDate) -> Vec<f64> {
        let mut row = policy_row.to_vec();
        if self.month {
            let m = date.month();
            for level in 2..=12 {
                row.push(if m == level { 1.0 } else { 0.0 });
            }
        }
        if self.weekday {
            let wd = date.weekday().num_days_from_monday();
            for level in 1..=6 {
                row.push(if wd == level { 1.0 } else { 0.0 });
            }
        }
        row
    }
}

/// Log-logistic delay distribution with covariate-dependent scale
/// `alpha(x, t) = exp(features . scale_coefficients)` (days) and global
/// shape `beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLogisticDelayModel {
    pub shape: f64,
    pub scale_coefficients: Vec<f64>,
    pub feature_spec: DelayFeatureSpec,
    pub feature_names: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl LogLogisticDelayModel {
    pub fn log_scale(&self, features: &[f64]) -> f64 {
        features.iter().zip(&self.scale_coefficients).map(|(x, b)| x * b).sum()
    }

    /// `F(u) = 1 / (1 + (u/alpha)^{-beta})` for `u > 0`, else 0.
    pub fn cdf(&self, u_days: f64, features: &[f64]) -> f64 {
        if u_days <= 0.0 {
            return 0.0;
        }
        let w = self.shape * (u_days.ln() - self.log_scale(features));
        sigmoid(w)
    }

    pub fn log_pdf(&self, u_days: f64, features: &[f64]) -> f64 {
        let w = self.shape * (u_days.ln() - self.log_scale(features));
        self.shape.ln() - u_days.ln() + w - 2.0 * softplus(w)
    }
}

#[inline]
fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(w: f64) -> f64 {
    if w > 30.0 {
        w
    } else {
        w.exp().ln_1p()
    }
}

/// One claim for delay fitting: observed delay, truncation bound
/// `tau - t` (both in days), and the encoded feature row.
#[derive(Debug, Clone)]
pub struct DelayObservation {
    pub u_days: f64,
    pub truncation_days: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Maximize `sum log f(u) - log F(tau - t)` over claims reported by tau.
    Truncated,
    /// Maximize the plain likelihood; used with the full claim set (including
    /// claims not yet reported) as the idealized benchmark variant.
    OracleUntruncated,
}

/// Fit the delay regression by quasi-Newton ascent.
pub fn fit_truncated_delay(
    observations: &[DelayObservation],
    mode: TruncationMode,
    feature_spec: DelayFeatureSpec,
    feature_names: Vec<String>,
) -> Result<LogLogisticDelayModel> {
    if observations.len() < 2 {
        return Err(Error::validation("delay fit needs at least two observations"));
    }
    let p = observations[0].features.len();
    if observations.iter().any(|o| o.features.len() != p) {
        return Err(Error::validation("delay fit: ragged feature rows"));
    }
    if mode == TruncationMode::Truncated
        && observations.iter().any(|o| o.u_days > o.truncation_days + 1e-9)
    {
        return Err(Error::validation("delay fit: observation beyond its truncation bound"));
    }

    // theta = (delta_0..delta_{p-1}, log beta)
    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let beta = theta[p].exp();
        let mut value = 0.0;
        let mut grad = vec![0.0; p + 1];
        for obs in observations {
            let log_alpha: f64 =
                obs.features.iter().zip(&theta[..p]).map(|(x, b)| x * b).sum();
            let lu = obs.u_days.max(1e-12).ln();
            let w = beta * (lu - log_alpha);
            value += beta.ln() - lu + w - 2.0 * softplus(w);
            let dw = 1.0 - 2.0 * sigmoid(w);
            for (g, &xj) in grad[..p].iter_mut().zip(&obs.features) {
                *g += dw * (-beta) * xj;
            }
            grad[p] += 1.0 + dw * w;
            if mode == TruncationMode::Truncated {
                let wt = beta * (obs.truncation_days.max(1e-12).ln() - log_alpha);
                value -= -softplus(-wt);
                let dwt = sigmoid(-wt);
                for (g, &xj) in grad[..p].iter_mut().zip(&obs.features) {
                    *g -= dwt * (-beta) * xj;
                }
                grad[p] -= dwt * wt;
            }
        }
        Ok((value, grad))
    };

    // Start at the log-mean delay scale with shape 1.
    let mean_log_u = observations
        .iter()
        .map(|o| o.u_days.max(1e-12).ln())
        .sum::<f64>()
        / observations.len() as f64;
    let mut theta0 = vec![0.0; p + 1];
    theta0[0] = mean_log_u;
    let out = optim::maximize_bfgs(objective, &theta0, &BfgsOptions::default())?;

    Ok(LogLogisticDelayModel {
        shape: out.x[p].exp(),
        scale_coefficients: out.x[..p].to_vec(),
        feature_spec,
        feature_names,
        converged: out.converged,
        iterations: out.iterations,
        log_likelihood: out.value,
    })
}

/// Gather (u, truncation, features) rows from a dataset's claims. In
/// truncated mode only claims reported before tau enter; in oracle mode all
/// claims within the horizon enter with their full delay.
pub fn delay_observations(
    dataset: &ObservedDataset,
    mode: TruncationMode,
    spec: DelayFeatureSpec,
) -> Vec<DelayObservation> {
    let tau = dataset.grid.tau();
    let mut out = Vec::new();
    for (claim, &i) in dataset.claims.iter().zip(&dataset.claim_policy) {
        if dataset.grid.period_of(claim.occurrence_date).is_none() {
            continue;
        }
        if mode == TruncationMode::Truncated && claim.report_date >= tau {
            continue;
        }
        // Mid-day convention: a same-day report counts half a day.
        let u = (claim.report_date - claim.occurrence_date).num_days() as f64 + 0.5;
        let trunc = (tau - claim.occurrence_date).num_days() as f64 - 0.5;
        out.push(DelayObservation {
            u_days: u,
            truncation_days: trunc,
            features: spec.encode(dataset.policy_design.row(i), claim.occurrence_date),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Period integrals
// ---------------------------------------------------------------------------

/// m x T table of per-period mean reporting probabilities:
/// entry (i, l) approximates `(1/|period|) * integral of F(tau - t) dt`.
/// Multiplying by the period length in days gives the integral itself.
#[derive(Debug, Clone)]
pub struct ReportProbabilityTable {
    pub m: usize,
    pub t_len: usize,
    values: Vec<f64>,
    period_days: Vec<f64>,
}

impl ReportProbabilityTable {
    pub fn from_parts(m: usize, t_len: usize, values: Vec<f64>, period_days: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), m * t_len);
        debug_assert_eq!(period_days.len(), t_len);
        Self { m, t_len, values, period_days }
    }

    #[inline]
    pub fn mean_prob(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.t_len + t]
    }

    /// `integral_{period t} F(tau - s) ds` in days.
    #[inline]
    pub fn integral_days(&self, i: usize, t: usize) -> f64 {
        self.mean_prob(i, t) * self.period_days[t]
    }

    pub fn period_days(&self, t: usize) -> f64 {
        self.period_days[t]
    }
}

/// Daily midpoint quadrature of the delay CDF over each period, optionally
/// refined to `refine` points per day.
pub fn report_probability_integrals(
    model: &LogLogisticDelayModel,
    dataset: &ObservedDataset,
    refine: usize,
) -> ReportProbabilityTable {
    let m = dataset.m();
    let t_len = dataset.t_len();
    let refine = refine.max(1);
    let grid = &dataset.grid;
    let tau_day = grid.tau_day() as f64;
    let period_days: Vec<f64> =
        (0..t_len).map(|t| grid.period_len_days(t) as f64).collect();

    let rows = par::map_range(m, |i| {
        let policy_row = dataset.policy_design.row(i);
        let mut row = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let start = grid.day_of(grid.period_start(t));
            let n_days = grid.period_len_days(t);
            let mut acc = 0.0;
            for day in 0..n_days {
                let date = grid.period_start(t) + chrono::Days::new(day as u64);
                let features = model.feature_spec.encode(policy_row, date);
                for r in 0..refine {
                    let s = (start + day) as f64 + (r as f64 + 0.5) / refine as f64;
                    acc += model.cdf(tau_day - s, &features);
                }
            }
            row.push(acc / (n_days as f64 * refine as f64));
        }
        row
    });

    let mut values = Vec::with_capacity(m * t_len);
    for row in rows {
        values.extend(row);
    }
    ReportProbabilityTable { m, t_len, values, period_days }
}

/// Per-cell window-limited unreported integrals for IBNR simulation, in
/// days: `integral over period t of [F(t_max - s) - F(tau - s)] ds`, where
/// `t_max` is the end of period `t + D` (extended beyond the grid when
/// needed). Periods whose window closed before `tau` contribute zero.
pub fn report_window_integrals(
    model: &LogLogisticDelayModel,
    dataset: &ObservedDataset,
    refine: usize,
) -> Result<Vec<f64>> {
    let m = dataset.m();
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let refine = refine.max(1);
    let grid = &dataset.grid;
    let tau_day = grid.tau_day() as f64;

    // End-of-window day for each occurrence period, on the extended grid.
    let mut boundary = grid.tau();
    let mut extended: Vec<chrono::NaiveDate> = grid.boundaries.clone();
    for _ in 0..=d_max {
        boundary = match grid.granularity {
            crate::data::Granularity::Monthly => boundary + chrono::Months::new(1),
            crate::data::Granularity::Weekly => boundary + chrono::Days::new(7),
            crate::data::Granularity::Daily => boundary + chrono::Days::new(1),
        };
        extended.push(boundary);
    }
    let t_max_day: Vec<f64> = (0..t_len)
        .map(|t| grid.day_of(extended[t + d_max + 1]) as f64)
        .collect();

    let rows = par::map_range(m, |i| {
        let policy_row = dataset.policy_design.row(i);
        let mut row = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t_max_day[t] <= tau_day {
                row.push(0.0);
                continue;
            }
            let start = grid.day_of(grid.period_start(t));
            let n_days = grid.period_len_days(t);
            let mut acc = 0.0;
            for day in 0..n_days {
                let date = grid.period_start(t) + chrono::Days::new(day as u64);
                let features = model.feature_spec.encode(policy_row, date);
                for r in 0..refine {
                    let s = (start + day) as f64 + (r as f64 + 0.5) / refine as f64;
                    let w = model.cdf(t_max_day[t] - s, &features)
                        - model.cdf(tau_day - s, &features);
                    acc += w.max(0.0);
                }
            }
            row.push(acc / refine as f64);
        }
        row
    });
    Ok(rows.into_iter().flatten().collect())
}

/// `P(report in [tau, t_max] | occurrence at t) = F(t_max - t) - F(tau - t)`.
pub fn window_report_probability(
    model: &LogLogisticDelayModel,
    t_day: f64,
    features: &[f64],
    tau_day: f64,
    t_max_day: f64,
) -> Result<f64> {
    if tau_day > t_max_day {
        return Err(Error::validation("window end precedes the valuation date"));
    }
    Ok(model.cdf(t_max_day - t_day, features) - model.cdf(tau_day - t_day, features))
}

// ---------------------------------------------------------------------------
