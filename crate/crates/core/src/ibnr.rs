//! IBNR claim-count prediction: Viterbi-decoded state path, Monte-Carlo
//! simulation of unreported counts for all three model families, the
//! empirical beyond-window tail estimator, the Chain Ladder baseline, and
//! evaluation metrics.

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::delay::continuous::report_window_integrals;
use crate::delay::discrete::sample_dirichlet;
use crate::em::{
    cm, dm, mm, FitOptions, ModelParams,
};
use crate::error::{Error, Result};
use crate::hmm::viterbi;
use crate::par;

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Monte-Carlo distribution of the total IBNR claim count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbnrEstimate {
    pub draws: Vec<u64>,
    pub point_estimate: f64,
    /// Empirical 2.5% / 97.5% quantiles of the draws.
    pub lower: f64,
    pub upper: f64,
    /// Mean simulated count per occurrence period.
    pub per_period_mean: Vec<f64>,
    pub state_path: Vec<usize>,
}

impl IbnrEstimate {
    fn from_draws(per_draw_totals: Vec<u64>, per_period_mean: Vec<f64>, path: Vec<usize>) -> Self {
        let n = per_draw_totals.len();
        let mut sorted = per_draw_totals.clone();
        sorted.sort_unstable();
        let point = sorted.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let lo_idx = (0.025 * (n as f64 - 1.0)).floor() as usize;
        let hi_idx = (0.975 * (n as f64 - 1.0)).ceil() as usize;
        IbnrEstimate {
            point_estimate: point,
            lower: sorted[lo_idx.min(n - 1)] as f64,
            upper: sorted[hi_idx.min(n - 1)] as f64,
            per_period_mean,
            draws: per_draw_totals,
            state_path: path,
        }
    }
}

/// Per-cell simulation plan: state-dependent rates `e * lambda_j(x_i)` plus
/// the family's unreported factor — fixed (MM: `1 - p^r`; CM: windowed CDF
/// integral) or a fresh Dirichlet tail draw per simulation (DM).
struct CellPlan {
    t: usize,
    rates: Vec<f64>,
    kind: CellKind,
}

enum CellKind {
    Fixed(f64),
    Dirichlet { eta: Vec<f64>, window: usize },
}

/// How the hidden-state path enters the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatePathMode {
    /// One fixed path from Viterbi decoding.
    #[default]
    Viterbi,
    /// A fresh path sampled from the joint state posterior per draw
    /// (sensitivity variant).
    Posterior,
}

/// Simulate the IBNR claim-count distribution under fitted parameters with
/// the Viterbi-decoded state path.
pub fn simulate_ibnr(
    dataset: &ObservedDataset,
    params: &ModelParams,
    options: &FitOptions,
    n_sims: usize,
    seed: u64,
) -> Result<IbnrEstimate> {
    simulate_ibnr_with(dataset, params, options, n_sims, seed, StatePathMode::Viterbi)
}

/// Simulate the IBNR claim-count distribution under fitted parameters.
///
/// Every draw samples per-cell Poisson counts with mean
/// `e lambda_{c_t}(x_i) * (1 - p^r)`, where the unreported probability comes
/// from the model family and `c` is either the single Viterbi path or a
/// per-draw posterior path sample.
pub fn simulate_ibnr_with(
    dataset: &ObservedDataset,
    params: &ModelParams,
    options: &FitOptions,
    n_sims: usize,
    seed: u64,
    path_mode: StatePathMode,
) -> Result<IbnrEstimate> {
    if n_sims == 0 {
        return Err(Error::validation("need at least one simulation draw"));
    }
    let t_len = dataset.t_len();
    let d_max = dataset.d_max();
    let m = dataset.m();

    let emissions = match params {
        ModelParams::Mm(p) => mm::build_emissions(dataset, p, options)?,
        ModelParams::Dm(p) => dm::build_emissions(dataset, p, options)?,
        ModelParams::Cm(p) => cm::build_emissions(dataset, p, options)?,
    };
    let path = viterbi(params.hmm(), &emissions)?;

    // Per-policy, per-state rates e * lambda_j(x_i).
    let theta = params.theta();
    let g = params.g();
    let lambda: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let row = dataset.policy_design.row(i);
            theta
                .iter()
                .map(|th| row.iter().zip(th).map(|(x, b)| x * b).sum::<f64>().exp())
                .collect()
        })
        .collect();
    let cell_rates = |i: usize, t: usize| -> Vec<f64> {
        let e = dataset.exposure.get(i, t);
        (0..g).map(|j| e * lambda[i][j]).collect()
    };

    let mut plans: Vec<CellPlan> = Vec::new();
    match params {
        ModelParams::Mm(p) => {
            let probs = mm::delay_prob_vectors(dataset, p, options)?;
            for i in 0..m {
                for t in 0..t_len {
                    if dataset.exposure.get(i, t) <= 0.0 {
                        continue;
                    }
                    let window = dataset.runoff.observed_window(t);
                    let unreported =
                        (1.0 - probs[i * t_len + t].reported_mass(window)).max(0.0);
                    if unreported > 0.0 {
                        plans.push(CellPlan {
                            t,
                            rates: cell_rates(i, t),
                            kind: CellKind::Fixed(unreported),
                        });
                    }
                }
            }
        }
        ModelParams::Dm(p) => {
            let etas = dm::eta_table(dataset, p, options)?;
            for i in 0..m {
                for t in 0..t_len {
                    if dataset.exposure.get(i, t) <= 0.0 {
                        continue;
                    }
                    let window = dataset.runoff.observed_window(t);
                    if window >= d_max {
                        continue; // fully observed: nothing unreported within D
                    }
                    plans.push(CellPlan {
                        t,
                        rates: cell_rates(i, t),
                        kind: CellKind::Dirichlet {
                            eta: etas[i * t_len + t].clone(),
                            window,
                        },
                    });
                }
            }
        }
        ModelParams::Cm(p) => {
            // Window-limited unreported mass so the CM targets the same
            // <= D-lag IBNR quantity as the discrete models.
            let table = report_window_integrals(&p.delay, dataset, options.quadrature_refine)?;
            for i in 0..m {
                for t in 0..t_len {
                    if dataset.exposure.get(i, t) <= 0.0 {
                        continue;
                    }
                    let factor = table[i * t_len + t];
                    if factor > 0.0 {
                        plans.push(CellPlan {
                            t,
                            rates: cell_rates(i, t),
                            kind: CellKind::Fixed(factor),
                        });
                    }
                }
            }
        }
    }

    let hmm_params = params.hmm();
    let per_draw: Vec<(u64, Vec<f64>)> = par::map_range(n_sims, |s| {
        let mut rng = crate::em::dm::cell_rng(seed, [0xB1A5, s as u64, 0]);
        let draw_path: Vec<usize> = match path_mode {
            StatePathMode::Viterbi => path.clone(),
            StatePathMode::Posterior => {
                crate::hmm::sample_posterior_path(hmm_params, &emissions, &mut rng)
                    .expect("validated parameters")
            }
        };
        let mut total = 0u64;
        let mut per_period = vec![0.0f64; t_len];
        for plan in &plans {
            let rate = plan.rates[draw_path[plan.t]];
            let nu = match &plan.kind {
                CellKind::Fixed(factor) => rate * factor,
                CellKind::Dirichlet { eta, window } => {
                    let p = sample_dirichlet(eta, &mut rng)
                        .expect("validated Dirichlet parameters");
                    let unreported: f64 = p[window + 1..].iter().sum();
                    rate * unreported
                }
            };
            if nu <= 0.0 {
                continue;
            }
            let count = Poisson::new(nu).expect("positive mean").sample(&mut rng) as u64;
            total += count;
            per_period[plan.t] += count as f64;
        }
        (total, per_period)
    });

    let mut totals = Vec::with_capacity(n_sims);
    let mut per_period_mean = vec![0.0f64; t_len];
    for (total, pp) in per_draw {
        totals.push(total);
        for (acc, v) in per_period_mean.iter_mut().zip(pp) {
            *acc += v;
        }
    }
    per_period_mean.iter_mut().for_each(|v| *v /= n_sims as f64);
    Ok(IbnrEstimate::from_draws(totals, per_period_mean, path))
}

// ---------------------------------------------------------------------------
// Beyond-window tail
// ---------------------------------------------------------------------------

/// Empirical beyond-window estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailEstimate {
    /// `sum_t sum_{d > min(D, T-t)} z_hat_{t,d}`: every lag outside period
    /// `t`'s observation window, including not-yet-observed in-window lags.
    pub total: f64,
    /// Only the `d > D` portion: claims the lag window excludes entirely.
    /// This is the component to add on top of a model's own IBNR estimate,
    /// which already covers the in-window unreported lags.
    pub beyond_d: f64,
    pub warning: Option<String>,
}

/// Empirical estimate of claims outside each period's observation window:
/// `z_hat_{t,d} = (1/(T-1)) * sum_{l<t} z_{l,d}` averaged over observed
/// history (lags beyond `D` come from the ingestion spillover tally).
pub fn tail_beyond_d(runoff: &crate::data::RunOffArray) -> TailEstimate {
    let t_len = runoff.t_len;
    if t_len < 2 {
        return TailEstimate {
            total: 0.0,
            beyond_d: 0.0,
            warning: Some("no history for the tail estimator".into()),
        };
    }
    let d_max = runoff.d_max;
    // Aggregate observed counts by (period, lag), including spillover lags.
    let max_lag = runoff
        .spillover
        .keys()
        .map(|&(_, d)| d)
        .max()
        .unwrap_or(d_max)
        .max(d_max);
    let mut agg = vec![vec![0.0f64; max_lag + 1]; t_len];
    for t in 0..t_len {
        let window = runoff.observed_window(t);
        for d in 0..=window {
            let total: u32 = (0..runoff.m).map(|i| runoff.z(i, t, d)).sum();
            agg[t][d] = total as f64;
        }
    }
    for (&(t, d), &c) in &runoff.spillover {
        if t < t_len && d <= max_lag {
            agg[t][d] += c as f64;
        }
    }

    let denom = (t_len - 1) as f64;
    let mut total = 0.0;
    let mut beyond = 0.0;
    let mut any_history = false;
    for t in 0..t_len {
        // 1-based window bound min(D, T - t); in 0-based terms the first
        // estimated lag is min(D, T-1-t) + 1.
        let from = d_max.min(t_len - 1 - t) + 1;
        for d in from..=max_lag {
            let hist: f64 = (0..t).map(|l| agg[l][d]).sum();
            if hist > 0.0 {
                any_history = true;
            }
            total += hist / denom;
            if d > d_max {
                beyond += hist / denom;
            }
        }
    }
    let warning = if any_history {
        None
    } else {
        Some("no beyond-window history observed; tail estimate is zero".into())
    };
    TailEstimate { total, beyond_d: beyond, warning }
}

// ---------------------------------------------------------------------------
// Chain Ladder
// ---------------------------------------------------------------------------

/// Cumulative reported counts by occurrence period and development lag,
/// aggregated over policies. Row `t` covers observed lags `0..=min(D, T-1-t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOffTriangle {
    pub rows: Vec<Vec<f64>>,
    pub d_max: usize,
}

impl RunOffTriangle {
    pub fn from_runoff(runoff: &crate::data::RunOffArray) -> Self {
        let mut rows = Vec::with_capacity(runoff.t_len);
        for t in 0..runoff.t_len {
            let window = runoff.observed_window(t);
            let mut row = Vec::with_capacity(window + 1);
            let mut cum = 0.0;
            for d in 0..=window {
                let total: u32 = (0..runoff.m).map(|i| runoff.z(i, t, d)).sum();
                cum += total as f64;
                row.push(cum);
            }
            rows.push(row);
        }
        Self { rows, d_max: runoff.d_max }
    }

    pub fn new(rows: Vec<Vec<f64>>, d_max: usize) -> Result<Self> {
        for (t, row) in rows.iter().enumerate() {
            if row.is_empty() || row.len() > d_max + 1 {
                return Err(Error::validation(format!("triangle row {t} has a bad length")));
            }
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::validation(format!(
                    "triangle row {t} is not cumulative"
                )));
            }
        }
        Ok(Self { rows, d_max })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainLadderResult {
    /// Volume-weighted development factors for lags `0 -> 1, ..., D-1 -> D`.
    pub development_factors: Vec<f64>,
    /// Projected cumulative counts, every row developed to lag `D`.
    pub projected: Vec<Vec<f64>>,
    pub ibnr: f64,
    pub warnings: Vec<String>,
}

/// Volume-weighted Chain Ladder on a cumulative run-off triangle.
pub fn chain_ladder(triangle: &RunOffTriangle) -> Result<ChainLadderResult> {
    let n = triangle.rows.len();
    if n < 2 {
        return Err(Error::validation("chain ladder needs at least two occurrence rows"));
    }
    let d_max = triangle.d_max;
    let mut factors = Vec::with_capacity(d_max);
    let mut warnings = Vec::new();
    for d in 0..d_max {
        let mut num = 0.0;
        let mut den = 0.0;
        for row in &triangle.rows {
            if row.len() > d + 1 {
                num += row[d + 1];
                den += row[d];
            }
        }
        if den <= 0.0 {
            warnings.push(format!(
                "development factor {d}->{} has zero denominator; using 1",
                d + 1
            ));
            factors.push(1.0);
        } else {
            factors.push(num / den);
        }
    }

    let mut projected = Vec::with_capacity(n);
    let mut ibnr = 0.0;
    for row in &triangle.rows {
        let mut proj = row.clone();
        for d in row.len()..=d_max {
            let prev = proj[d - 1];
            proj.push(prev * factors[d - 1]);
        }
        ibnr += proj[d_max] - row.last().unwrap();
        projected.push(proj);
    }
    Ok(ChainLadderResult { development_factors: factors, projected, ibnr, warnings })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatePrediction {
    pub date: chrono::NaiveDate,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub actual: Option<u64>,
    pub ape: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationMetrics {
    pub mean_ape: f64,
    pub median_ape: f64,
    pub sd_ape: f64,
    /// Dates whose actual count fell inside [lower, upper].
    pub covered: usize,
    /// Dates with a known actual count.
    pub evaluated: usize,
    /// Dates excluded from percentage metrics because the actual was zero.
    pub zero_actual_dates: usize,
}

/// Absolute-percentage-error and coverage metrics across valuation dates.
/// Dates with a zero actual are excluded from the percentage statistics and
/// reported separately.
pub fn evaluate(predictions: &[DatePrediction]) -> Result<EvaluationMetrics> {
    let mut apes = Vec::new();
    let mut covered = 0usize;
    let mut evaluated = 0usize;
    let mut zero_actual = 0usize;
    for p in predictions {
        let Some(actual) = p.actual else { continue };
        evaluated += 1;
        if (actual as f64) >= p.lower && (actual as f64) <= p.upper {
            covered += 1;
        }
        if actual == 0 {
            zero_actual += 1;
        } else {
            apes.push((p.point - actual as f64).abs() / actual as f64);
        }
    }
    if evaluated == 0 {
        return Err(Error::validation("no dates with actual counts to evaluate"));
    }
    let n = apes.len().max(1) as f64;
    let mean = apes.iter().sum::<f64>() / n;
    let sd = if apes.len() > 1 {
        (apes.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (apes.len() as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = apes.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(EvaluationMetrics {
        mean_ape: mean,
        median_ape: median,
        sd_ape: sd,
        covered,
        evaluated,
        zero_actual_dates: zero_actual,
    })
}

// ---------------------------------------------------------------------------
