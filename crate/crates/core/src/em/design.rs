//! Design-matrix assembly shared by the fitters: per-(policy, period) delay
//! designs with optional occurrence-time dummies, state intensity tables,
//! and a log-factorial cache for fast Poisson pmfs.

use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::error::Result;
use crate::glm::{DesignMatrix, Link};

/// Occurrence-time dummies for the discrete delay regressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayTimeFeatures {
    None,
    /// Calendar-month dummies of the occurrence period.
    Month,
    /// Month dummies plus the weekday on which the period ends.
    MonthWeekday,
}

pub fn delay_design_names(dataset: &ObservedDataset, features: DelayTimeFeatures) -> Vec<String> {
    let mut names = dataset.policy_design.names.clone();
    if matches!(features, DelayTimeFeatures::Month | DelayTimeFeatures::MonthWeekday) {
        for m in 2..=12 {
            names.push(format!("period_month={m}"));
        }
    }
    if matches!(features, DelayTimeFeatures::MonthWeekday) {
        for wd in 1..=6 {
            names.push(format!("period_end_weekday={wd}"));
        }
    }
    names
}

/// Rows indexed `i * T + t`: the policy design row followed by the period's
/// time dummies.
pub fn build_delay_design(
    dataset: &ObservedDataset,
    features: DelayTimeFeatures,
) -> Result<DesignMatrix> {
    let t_len = dataset.t_len();
    let names = delay_design_names(dataset, features);
    let time_block: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let mut row = Vec::new();
            if matches!(features, DelayTimeFeatures::Month | DelayTimeFeatures::MonthWeekday) {
                let month = dataset.grid.month_of_period(t);
                for level in 2..=12 {
                    row.push(if month == level { 1.0 } else { 0.0 });
                }
            }
            if matches!(features, DelayTimeFeatures::MonthWeekday) {
                let wd =
                    dataset.grid.weekday_of_period_end(t).num_days_from_monday();
                for level in 1..=6 {
                    row.push(if wd == level { 1.0 } else { 0.0 });
                }
            }
            row
        })
        .collect();
    let mut rows = Vec::with_capacity(dataset.m() * t_len);
    for i in 0..dataset.m() {
        let base = dataset.policy_design.row(i);
        for tb in &time_block {
            let mut row = base.to_vec();
            row.extend(tb);
            rows.push(row);
        }
    }
    DesignMatrix::new(rows, names)
}

#[inline]
pub fn delay_row_index(t_len: usize, i: usize, t: usize) -> usize {
    i * t_len + t
}

/// Per-state intensities `lambda_j(x_i) = exp(x_i . theta_j)`, g x m.
pub fn lambda_matrix(dataset: &ObservedDataset, theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    theta
        .iter()
        .map(|tj| {
            (0..dataset.m())
                .map(|i| dataset.policy_design.dot(i, tj).exp())
                .collect()
        })
        .collect()
}

/// Link used for the lag-d conditional probability regression.
#[inline]
pub fn lag_link(d: usize, link_d1: Link) -> Link {
    if d == 1 {
        link_d1
    } else {
        Link::Cloglog
    }
}

/// Cumulative log-factorials so Poisson pmfs avoid `ln_gamma` in hot loops.
pub struct LnFactorial(Vec<f64>);

impl LnFactorial {
    pub fn up_to(n: usize) -> Self {
        let mut v = Vec::with_capacity(n + 1);
        v.push(0.0);
        for k in 1..=n {
            v.push(v[k - 1] + (k as f64).ln());
        }
        Self(v)
    }

    #[inline]
    pub fn get(&self, n: u64) -> f64 {
        self.0[n as usize]
    }
}

/// `log Poisson(n; mu)` with a cached factorial table.
#[inline]
pub fn log_pois(n: u64, mu: f64, lnf: &LnFactorial) -> f64 {
    if mu <= 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mu.ln() - mu - lnf.get(n)
}
