//! Initialization: a short fit on the completely observed window
//! `t <= T - D`, seeded from a quantile split of pooled period rates.

use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::hmm::HmmParams;

/// Seed HMM parameters and per-state intercepts from pooled period rates:
/// periods are ranked by `sum_i numerator / sum_i denominator`, split into
/// `g` contiguous rank groups, and group mean rates become the intercepts;
/// the hard group labels give smoothed transition counts.
pub(crate) fn quantile_seed(
    t_len: usize,
    g: usize,
    rate_num: impl Fn(usize) -> f64,
    rate_den: impl Fn(usize) -> f64,
) -> (HmmParams, Vec<f64>) {
    let rates: Vec<f64> = (0..t_len)
        .map(|t| {
            let den = rate_den(t);
            if den > 0.0 {
                rate_num(t) / den
            } else {
                0.0
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..t_len).collect();
    order.sort_by(|&a, &b| rates[a].partial_cmp(&rates[b]).unwrap().then(a.cmp(&b)));
    let mut label = vec![0usize; t_len];
    for (rank, &t) in order.iter().enumerate() {
        label[t] = (rank * g) / t_len.max(1);
    }

    let mut group_rate = vec![0.0; g];
    let mut group_n = vec![0usize; g];
    for t in 0..t_len {
        group_rate[label[t]] += rates[t];
        group_n[label[t]] += 1;
    }
    let base = (rates.iter().sum::<f64>() / t_len.max(1) as f64).max(1e-4);
    let mut means: Vec<f64> = (0..g)
        .map(|j| {
            if group_n[j] > 0 {
                (group_rate[j] / group_n[j] as f64).max(1e-6)
            } else {
                base * (0.5 + j as f64)
            }
        })
        .collect();
    // Separate coincident seeds so states do not start collapsed.
    for j in 1..g {
        if means[j] <= means[j - 1] * 1.0001 {
            means[j] = means[j - 1] * 1.25 + 1e-6;
        }
    }

    let mut pi1 = vec![0.5 / g as f64; g];
    pi1[label[0]] += 0.5;
    let s: f64 = pi1.iter().sum();
    pi1.iter_mut().for_each(|p| *p /= s);

    let mut gamma = vec![vec![0.5; g]; g];
    for t in 1..t_len {
        gamma[label[t - 1]][label[t]] += 1.0;
    }
    for row in gamma.iter_mut() {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }

    (HmmParams { pi1, gamma }, means)
}

/// The fully observed leading window, or an error when `T <= D`.
pub(crate) fn complete_window(dataset: &ObservedDataset) -> Result<ObservedDataset> {
    let t_keep = dataset.t_len().saturating_sub(dataset.d_max());
    if t_keep == 0 {
        return Err(Error::validation(format!(
            "initialization needs T > D (T = {}, D = {})",
            dataset.t_len(),
            dataset.d_max()
        )));
    }
    dataset.initial_window(t_keep)
}

/// Intercept-only state coefficient vectors from seeded mean rates.
pub(crate) fn intercept_theta(means: &[f64], p_freq: usize) -> Vec<Vec<f64>> {
    means
        .iter()
        .map(|&m| {
            let mut v = vec![0.0; p_freq];
            v[0] = m.ln();
            v
        })
        .collect()
}
