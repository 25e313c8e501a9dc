//! Portfolio generator following the fitted models' own generative story:
//! a hidden state path, per-policy Poisson counts given states, lag
//! assignment by multinomial or per-cell Dirichlet draws (or continuous
//! log-logistic delays in days), and uniform placement of occurrence days
//! within periods. Emits the observable CSV tables plus held-out truth.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{
    assemble, ClaimRecord, CovariateValue, Granularity, IngestOptions, ObservedDataset,
    PeriodGrid, PolicyRecord,
};
use crate::delay::discrete::{sample_dirichlet, DelayProbVector};
use crate::error::{Error, Result};
use crate::hmm::HmmParams;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayTruth {
    /// A fixed lag-probability vector shared by every cell.
    Multinomial { p: Vec<f64> },
    /// Per-cell lag probabilities drawn from a Dirichlet.
    Dirichlet { eta: Vec<f64> },
    /// Continuous delays in days; lags follow from the calendar.
    LogLogistic { scale_days: f64, shape: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposurePattern {
    /// Every policy covers the whole observation window.
    Full,
    /// Random entry and exit dates (at least ~20% of the window).
    Staggered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub m: usize,
    pub t_len: usize,
    pub d_max: usize,
    pub granularity: Granularity,
    pub start_date: NaiveDate,
    pub hmm: HmmParams,
    /// Per-state frequency coefficients over (intercept, covariates...).
    pub theta: Vec<Vec<f64>>,
    /// Generate the default covariates (one 3-level categorical, one
    /// standardized numeric)? Otherwise policies carry no covariates and
    /// theta must be intercept-only.
    pub covariates: bool,
    pub delay: DelayTruth,
    pub exposure: ExposurePattern,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.hmm.validate()?;
        if self.theta.len() != self.hmm.g() {
            return Err(Error::validation("theta must have one vector per state"));
        }
        let p_expected = if self.covariates { 4 } else { 1 };
        if self.theta.iter().any(|t| t.len() != p_expected) {
            return Err(Error::validation(format!(
                "theta vectors must have length {p_expected}"
            )));
        }
        match &self.delay {
            DelayTruth::Multinomial { p } => {
                DelayProbVector::new(p.clone())?;
                if p.len() != self.d_max + 1 {
                    return Err(Error::validation("delay p must have length D+1"));
                }
            }
            DelayTruth::Dirichlet { eta } => {
                if eta.len() != self.d_max + 1 || eta.iter().any(|&e| e <= 0.0) {
                    return Err(Error::validation("delay eta must be positive, length D+1"));
                }
            }
            DelayTruth::LogLogistic { scale_days, shape } => {
                if !(*scale_days > 0.0 && *shape > 0.0) {
                    return Err(Error::validation("log-logistic truth needs positive parameters"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthEvent {
    pub policy_idx: usize,
    pub occurrence_date: NaiveDate,
    pub report_date: NaiveDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub state_path: Vec<usize>,
    pub events: Vec<TruthEvent>,
    pub grid: PeriodGrid,
    pub d_max: usize,
}

impl GroundTruth {
    /// Actual IBNR count at the end of period `t_len`: occurred within the
    /// horizon, reported on/after its valuation date, lag at most `d_max`.
    pub fn ibnr_at(&self, t_len: usize, d_max: usize) -> Result<u64> {
        let grid = self.grid.truncated(t_len)?;
        let tau = grid.tau();
        let mut count = 0u64;
        for ev in &self.events {
            if ev.occurrence_date < tau && ev.report_date >= tau {
                let Some(t) = grid.period_of(ev.occurrence_date) else {
                    continue;
                };
                let lag = self.grid.extended_period_of(ev.report_date) - t as i64;
                if lag <= d_max as i64 {
                    count += 1;
                }
            }
        }
        Ok(count)
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn gen_policies(config: &ScenarioConfig, grid: &PeriodGrid, rng: &mut ChaCha12Rng) -> Vec<PolicyRecord> {
    let start = grid.start();
    let tau = grid.tau();
    let horizon_days = (tau - start).num_days();
    (0..config.m)
        .map(|i| {
            let (coverage_start, coverage_end) = match config.exposure {
                ExposurePattern::Full => (start, tau),
                ExposurePattern::Staggered => {
                    let a = rng.gen_range(0..=(horizon_days * 2 / 5)) as u64;
                    let min_len = (horizon_days / 5).max(1) as u64;
                    let max_len = (horizon_days as u64).saturating_sub(a);
                    let len = rng.gen_range(min_len..=max_len.max(min_len));
                    let s = start + Days::new(a);
                    (s, (s + Days::new(len)).min(tau))
                }
            };
            let mut covariates = BTreeMap::new();
            if config.covariates {
                let class = ["a", "b", "c"][rng.gen_range(0..3)];
                covariates.insert(
                    "class".to_string(),
                    CovariateValue::Categorical(class.to_string()),
                );
                let score: f64 = rng.sample(rand_distr::StandardNormal);
                covariates.insert("score".to_string(), CovariateValue::Numeric(score));
            }
            PolicyRecord {
                policy_id: format!("p{i:06}"),
                coverage_start,
                coverage_end,
                covariates,
            }
        })
        .collect()
}

/// Encoded frequency design row for a generated policy, matching the
/// ingestion encoding (intercept, class=b, class=c, score).
fn design_row(policy: &PolicyRecord, covariates: bool) -> Vec<f64> {
    if !covariates {
        return vec![1.0];
    }
    let class = match policy.covariates.get("class") {
        Some(CovariateValue::Categorical(s)) => s.as_str(),
        _ => "a",
    };
    let score = match policy.covariates.get("score") {
        Some(CovariateValue::Numeric(x)) => *x,
        _ => 0.0,
    };
    vec![
        1.0,
        f64::from(class == "b"),
        f64::from(class == "c"),
        score,
    ]
}

/// Sample the full portfolio: observable dataset at tau plus ground truth.
pub fn generate(config: &ScenarioConfig) -> Result<(ObservedDataset, GroundTruth)> {
    config.validate()?;
    let grid = PeriodGrid::new(config.start_date, config.t_len, config.granularity)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    // Hidden state path.
    let g = config.hmm.g();
    let mut state_path = Vec::with_capacity(config.t_len);
    let mut state = sample_categorical(&config.hmm.pi1, &mut rng);
    state_path.push(state);
    for _ in 1..config.t_len {
        state = sample_categorical(&config.hmm.gamma[state], &mut rng);
        state_path.push(state);
    }
    debug_assert!(state_path.iter().all(|&s| s < g));

    let policies = gen_policies(config, &grid, &mut rng);
    let lambda_rows: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| {
            let x = design_row(p, config.covariates);
            config
                .theta
                .iter()
                .map(|theta| x.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>().exp())
                .collect()
        })
        .collect();

    let mut events = Vec::new();
    for (i, policy) in policies.iter().enumerate() {
        let mut cell_rng = ChaCha12Rng::seed_from_u64(
            config.seed ^ 0xA076_1D64_78BD_642F ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        for t in 0..config.t_len {
            let e = exposure_fraction(policy, &grid, t);
            if e == 0.0 {
                continue;
            }
            let mean = e * lambda_rows[i][state_path[t]];
            if mean <= 0.0 {
                continue;
            }
            let n = Poisson::new(mean)
                .map_err(|err| Error::computation(format!("poisson({mean}): {err}")))?
                .sample(&mut cell_rng) as u64;
            if n == 0 {
                continue;
            }
            // Per-cell lag probabilities.
            let cell_p: Option<Vec<f64>> = match &config.delay {
                DelayTruth::Multinomial { p } => Some(p.clone()),
                DelayTruth::Dirichlet { eta } => Some(sample_dirichlet(eta, &mut cell_rng)?),
                DelayTruth::LogLogistic { .. } => None,
            };
            for _ in 0..n {
                let occurrence_date =
                    uniform_day_in_coverage(policy, &grid, t, &mut cell_rng);
                let report_date = match &config.delay {
                    DelayTruth::LogLogistic { scale_days, shape } => {
                        let v: f64 = cell_rng.gen_range(1e-12..1.0);
                        let u = scale_days * (v / (1.0 - v)).powf(1.0 / *shape);
                        occurrence_date + Days::new(u.floor().max(0.0) as u64)
                    }
                    _ => {
                        let p = cell_p.as_ref().unwrap();
                        let d = sample_categorical(p, &mut cell_rng);
                        uniform_report_day(&grid, t + d, occurrence_date, &mut cell_rng)
                    }
                };
                events.push(TruthEvent { policy_idx: i, occurrence_date, report_date });
            }
        }
    }
    // Deterministic order independent of the generation loop details.
    events.sort_by_key(|ev| (ev.policy_idx, ev.occurrence_date, ev.report_date));

    let claims: Vec<ClaimRecord> = events
        .iter()
        .map(|ev| ClaimRecord {
            policy_id: policies[ev.policy_idx].policy_id.clone(),
            occurrence_date: ev.occurrence_date,
            report_date: ev.report_date,
        })
        .collect();
    let dataset = assemble(
        policies,
        claims,
        grid.clone(),
        config.d_max,
        &IngestOptions::default(),
    )?;
    let truth = GroundTruth { state_path, events, grid, d_max: config.d_max };
    Ok((dataset, truth))
}

fn sample_categorical(weights: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u: f64 = rng.gen_range(0.0..total);
    for (k, &w) in weights.iter().enumerate() {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn exposure_fraction(policy: &PolicyRecord, grid: &PeriodGrid, t: usize) -> f64 {
    let ps = grid.period_start(t);
    let pe = grid.period_end(t);
    let lo = policy.coverage_start.max(ps);
    let hi = policy.coverage_end.min(pe);
    if hi <= lo {
        0.0
    } else {
        (hi - lo).num_days() as f64 / (pe - ps).num_days() as f64
    }
}

/// Uniform occurrence day within the covered part of the period.
fn uniform_day_in_coverage(
    policy: &PolicyRecord,
    grid: &PeriodGrid,
    t: usize,
    rng: &mut ChaCha12Rng,
) -> NaiveDate {
    let lo = policy.coverage_start.max(grid.period_start(t));
    let hi = policy.coverage_end.min(grid.period_end(t));
    let span = (hi - lo).num_days().max(1);
    lo + Days::new(rng.gen_range(0..span) as u64)
}

/// Uniform report day within the report period (>= occurrence for lag 0).
/// Periods beyond the grid are extended arithmetically.
fn uniform_report_day(
    grid: &PeriodGrid,
    report_period: usize,
    occurrence: NaiveDate,
    rng: &mut ChaCha12Rng,
) -> NaiveDate {
    let (start, end) = extended_period_bounds(grid, report_period);
    let lo = start.max(occurrence);
    let span = (end - lo).num_days().max(1);
    lo + Days::new(rng.gen_range(0..span) as u64)
}

fn extended_period_bounds(grid: &PeriodGrid, t: usize) -> (NaiveDate, NaiveDate) {
    if t < grid.n_periods() {
        return (grid.period_start(t), grid.period_end(t));
    }
    let extra = t - grid.n_periods();
    let mut start = grid.tau();
    for _ in 0..extra {
        start = step(grid, start);
    }
    (start, step(grid, start))
}

fn step(grid: &PeriodGrid, d: NaiveDate) -> NaiveDate {
    match grid.granularity {
        Granularity::Monthly => d + chrono::Months::new(1),
        Granularity::Weekly => d + Days::new(7),
        Granularity::Daily => d + Days::new(1),
    }
}

// ---------------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------------

/// Write `policies.csv`, `claims.csv`, and `truth.json` under `dir`.
pub fn write_scenario(
    dataset: &ObservedDataset,
    truth: &GroundTruth,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("policies.csv"))?;
    let mut header = vec!["policy_id".to_string(), "start_date".into(), "end_date".into()];
    for col in &dataset.schema.columns {
        header.push(col.name.clone());
    }
    w.write_record(&header)?;
    for p in &dataset.policies {
        let mut rec = vec![
            p.policy_id.clone(),
            p.coverage_start.to_string(),
            p.coverage_end.to_string(),
        ];
        for col in &dataset.schema.columns {
            rec.push(match &p.covariates[&col.name] {
                CovariateValue::Numeric(x) => format!("{x}"),
                CovariateValue::Categorical(s) => s.clone(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("claims.csv"))?;
    w.write_record(["policy_id", "occurrence_date", "report_date"])?;
    for c in &dataset.claims {
        w.write_record([
            c.policy_id.as_str(),
            &c.occurrence_date.to_string(),
            &c.report_date.to_string(),
        ])?;
    }
    w.flush()?;

    let truth_json = serde_json::to_string_pretty(truth)?;
    std::fs::write(dir.join("truth.json"), truth_json)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::mixed_poisson_pmf;

    pub(crate) fn base_config(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            m: 60,
            t_len: 24,
            d_max: 2,
            granularity: Granularity::Monthly,
            start_date: NaiveDate::from_ymd_opt(2014, 1, 1).unwrap(),
            hmm: HmmParams {
                pi1: vec![0.6, 0.4],
                gamma: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            },
            theta: vec![vec![-2.0], vec![-0.8]],
            covariates: false,
            delay: DelayTruth::Multinomial { p: vec![0.7, 0.2, 0.1] },
            exposure: ExposurePattern::Full,
            seed,
        }
    }

    #[test]
    fn ingest_round_trip_reproduces_runoff() {
        let (dataset, truth) = generate(&base_config(11)).unwrap();
        // Rebuild the run-off from the truth's event list by hand.
        let mut z = vec![0u32; dataset.m() * dataset.t_len() * (dataset.d_max() + 1)];
        let grid = &dataset.grid;
        for ev in &truth.events {
            if ev.report_date >= grid.tau() {
                continue;
            }
            let Some(t) = grid.period_of(ev.occurrence_date) else { continue };
            let d = (grid.extended_period_of(ev.report_date) - t as i64) as usize;
            if d <= dataset.d_max() {
                z[(ev.policy_idx * dataset.t_len() + t) * (dataset.d_max() + 1) + d] += 1;
            }
        }
        for i in 0..dataset.m() {
            for t in 0..dataset.t_len() {
                for d in 0..=dataset.runoff.observed_window(t) {
                    assert_eq!(
                        dataset.runoff.z(i, t, d),
                        z[(i * dataset.t_len() + t) * (dataset.d_max() + 1) + d],
                        "mismatch at ({i},{t},{d})"
                    );
                }
            }
        }
        dataset.runoff.check_consistency().unwrap();
    }

    #[test]
    fn ibnr_accounting_identity() {
        for seed in [1, 2, 3] {
            let (dataset, truth) = generate(&base_config(seed)).unwrap();
            let t_len = dataset.t_len();
            let direct = truth.ibnr_at(t_len, dataset.d_max()).unwrap();
            // (occurred <= tau with lag <= D) - (reported <= tau with lag <= D)
            let grid = &dataset.grid;
            let mut occurred = 0i64;
            let mut reported = 0i64;
            for ev in &truth.events {
                let Some(t) = grid.period_of(ev.occurrence_date) else { continue };
                let lag = grid.extended_period_of(ev.report_date) - t as i64;
                if lag <= dataset.d_max() as i64 {
                    occurred += 1;
                    if ev.report_date < grid.tau() {
                        reported += 1;
                    }
                }
            }
            assert_eq!(direct as i64, occurred - reported, "seed {seed}");
            // And the dataset-side computation agrees.
            assert_eq!(dataset.actual_ibnr_at(t_len).unwrap(), direct);
        }
    }

    #[test]
    fn no_delay_config_has_zero_ibnr() {
        let mut config = base_config(5);
        config.d_max = 0;
        config.delay = DelayTruth::Multinomial { p: vec![1.0] };
        let (dataset, truth) = generate(&config).unwrap();
        for t_len in 2..dataset.t_len() {
            assert_eq!(truth.ibnr_at(t_len, 0).unwrap(), 0);
        }
    }

    #[test]
    fn empirical_cell_mean_matches_intensity() {
        let mut config = base_config(7);
        config.m = 400;
        config.t_len = 30;
        config.hmm = HmmParams { pi1: vec![1.0], gamma: vec![vec![1.0]] };
        config.theta = vec![vec![-1.0]];
        let (dataset, _) = generate(&config).unwrap();
        let lambda = (-1.0f64).exp();
        let total: f64 = (0..dataset.m())
            .map(|i| {
                (0..dataset.t_len())
                    .map(|t| {
                        let w = dataset.runoff.observed_window(t);
                        (0..=w).map(|d| dataset.runoff.z(i, t, d) as f64).sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum();
        // Expected reported claims: m * sum_t lambda * p^r_t.
        let p = [0.7, 0.2, 0.1];
        let expected: f64 = (0..dataset.t_len())
            .map(|t| {
                let w = dataset.runoff.observed_window(t);
                let pr: f64 = p[..=w].iter().sum();
                dataset.m() as f64 * lambda * pr
            })
            .sum();
        let se = expected.sqrt();
        assert!(
            (total - expected).abs() < 4.0 * se,
            "total {total} vs expected {expected}"
        );
    }

    #[test]
    fn reported_marginal_matches_mixed_poisson() {
        // Across replicate generations, the first-period reported count of a
        // single policy follows the mixed Poisson with pi1 weights.
        let mut counts = std::collections::BTreeMap::new();
        let reps = 3000;
        for seed in 0..reps {
            let mut config = base_config(seed);
            config.m = 1;
            config.t_len = 4;
            let (dataset, _) = generate(&config).unwrap();
            *counts.entry(dataset.runoff.n_reported(0, 0)).or_insert(0usize) += 1;
        }
        let p_report = 1.0; // first period fully observed (t + D < T)
        let means: Vec<f64> =
            vec![(-2.0f64).exp() * p_report, (-0.8f64).exp() * p_report];
        for n in 0..3u32 {
            let expect = mixed_poisson_pmf(&[0.6, 0.4], &means, n as i64).unwrap();
            let obs = *counts.get(&n).unwrap_or(&0) as f64 / reps as f64;
            let se = (expect * (1.0 - expect) / reps as f64).sqrt();
            assert!(
                (obs - expect).abs() < 4.0 * se.max(1e-4),
                "n={n}: {obs} vs {expect}"
            );
        }
    }

    #[test]
    fn medium_portfolio_generates_quickly() {
        let mut config = base_config(77);
        config.m = 500;
        config.t_len = 60;
        config.covariates = true;
        config.theta = vec![vec![-2.0, 0.2, 0.4, 0.1], vec![-0.8, 0.2, 0.4, 0.1]];
        let start = std::time::Instant::now();
        let (dataset, _) = generate(&config).unwrap();
        assert!(dataset.claims.len() > 1000);
        assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, ta) = generate(&base_config(42)).unwrap();
        let (b, tb) = generate(&base_config(42)).unwrap();
        assert_eq!(ta.events.len(), tb.events.len());
        assert_eq!(ta.state_path, tb.state_path);
        for (x, y) in ta.events.iter().zip(&tb.events) {
            assert_eq!(x.occurrence_date, y.occurrence_date);
            assert_eq!(x.report_date, y.report_date);
        }
        assert_eq!(a.claims.len(), b.claims.len());
    }
}
