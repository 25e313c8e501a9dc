//! Domain types and dataset assembly: calendar grids, policy/claim tables,
//! exposure, and the run-off array of reported counts by occurrence period
//! and reporting lag.
//!
//! Conventions (0-based in code, 1-based in the actuarial literature):
//! * periods are right-open `[d_{t}, d_{t+1})`; the valuation date `tau` is
//!   the last grid boundary and lies outside every period;
//! * a claim is "reported" iff its report date is strictly before `tau`;
//! * the reporting lag is `report period - occurrence period`;
//! * claims with lag greater than `d_max` are kept in a spillover tally per
//!   `(occurrence period, lag)` instead of the run-off array.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Days, Months, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::DesignMatrix;

// ---------------------------------------------------------------------------
// Period grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Monthly,
    Weekly,
    Daily,
}

/// An ordered set of period boundaries `d_0 < d_1 < ... < d_T` with
/// `tau = d_T` as the valuation date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodGrid {
    pub boundaries: Vec<NaiveDate>,
    pub granularity: Granularity,
}

impl PeriodGrid {
    /// Build a grid from the first boundary and the number of periods.
    /// Monthly grids must start on the first of a month.
    pub fn new(start: NaiveDate, n_periods: usize, granularity: Granularity) -> Result<Self> {
        if n_periods == 0 {
            return Err(Error::validation("grid needs at least one period"));
        }
        if matches!(granularity, Granularity::Monthly) && start.day() != 1 {
            return Err(Error::validation(format!(
                "monthly grid must start on the first of a month, got {start}"
            )));
        }
        let mut boundaries = Vec::with_capacity(n_periods + 1);
        let mut d = start;
        boundaries.push(d);
        for _ in 0..n_periods {
            d = match granularity {
                Granularity::Monthly => d + Months::new(1),
                Granularity::Weekly => d + Days::new(7),
                Granularity::Daily => d + Days::new(1),
            };
            boundaries.push(d);
        }
        Ok(Self { boundaries, granularity })
    }

    pub fn n_periods(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn start(&self) -> NaiveDate {
        self.boundaries[0]
    }

    /// The valuation date `tau` (exclusive upper bound of the last period).
    pub fn tau(&self) -> NaiveDate {
        *self.boundaries.last().unwrap()
    }

    /// Period index containing `date`, or `None` outside `[d_0, tau)`.
    pub fn period_of(&self, date: NaiveDate) -> Option<usize> {
        if date < self.start() || date >= self.tau() {
            return None;
        }
        // Index of the last boundary <= date.
        let idx = match self.boundaries.binary_search(&date) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        Some(idx)
    }

    /// Period index extended arithmetically beyond the grid in both
    /// directions (used for report dates after `tau`).
    pub fn extended_period_of(&self, date: NaiveDate) -> i64 {
        match self.granularity {
            Granularity::Monthly => {
                let s = self.start();
                (date.year() as i64 - s.year() as i64) * 12 + date.month() as i64
                    - s.month() as i64
            }
            Granularity::Weekly => (date - self.start()).num_days().div_euclid(7),
            Granularity::Daily => (date - self.start()).num_days(),
        }
    }

    pub fn period_start(&self, t: usize) -> NaiveDate {
        self.boundaries[t]
    }

    pub fn period_end(&self, t: usize) -> NaiveDate {
        self.boundaries[t + 1]
    }

    pub fn period_len_days(&self, t: usize) -> i64 {
        (self.period_end(t) - self.period_start(t)).num_days()
    }

    /// Days from `d_0` to `date`.
    pub fn day_of(&self, date: NaiveDate) -> i64 {
        (date - self.start()).num_days()
    }

    pub fn tau_day(&self) -> i64 {
        self.day_of(self.tau())
    }

    /// Calendar month (1..=12) of the period start.
    pub fn month_of_period(&self, t: usize) -> u32 {
        self.period_start(t).month()
    }

    /// Weekday of the last day inside period `t`.
    pub fn weekday_of_period_end(&self, t: usize) -> Weekday {
        (self.period_end(t) - Days::new(1)).weekday()
    }

    /// Grid truncated to its first `n_periods` periods.
    pub fn truncated(&self, n_periods: usize) -> Result<Self> {
        if n_periods == 0 || n_periods > self.n_periods() {
            return Err(Error::validation(format!(
                "cannot truncate a {}-period grid to {n_periods}",
                self.n_periods()
            )));
        }
        Ok(Self {
            boundaries: self.boundaries[..=n_periods].to_vec(),
            granularity: self.granularity,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.boundaries.len() < 2 {
            return Err(Error::validation("grid needs at least one period"));
        }
        if !self.boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("grid boundaries must be strictly increasing"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Policies, claims, covariates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Numeric(f64),
    Categorical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy_id: String,
    pub coverage_start: NaiveDate,
    /// Exclusive end of coverage: the contract is in force on
    /// `[coverage_start, coverage_end)`.
    pub coverage_end: NaiveDate,
    pub covariates: BTreeMap<String, CovariateValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub policy_id: String,
    pub occurrence_date: NaiveDate,
    pub report_date: NaiveDate,
}

/// Dataset-level covariate schema shared by all policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<CovariateColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    Numeric,
    /// Sorted levels; the first is the reference level of the one-hot encoding.
    Categorical { levels: Vec<String> },
}

impl CovariateSchema {
    /// Encoded design columns (without intercept).
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for col in &self.columns {
            match &col.kind {
                CovariateKind::Numeric => names.push(col.name.clone()),
                CovariateKind::Categorical { levels } => {
                    for level in levels.iter().skip(1) {
                        names.push(format!("{}={}", col.name, level));
                    }
                }
            }
        }
        names
    }

    /// Encode one policy's covariates (without intercept).
    pub fn encode(&self, covs: &BTreeMap<String, CovariateValue>) -> Result<Vec<f64>> {
        let mut row = Vec::new();
        for col in &self.columns {
            let value = covs.get(&col.name).ok_or_else(|| {
                Error::validation(format!("missing covariate '{}'", col.name))
            })?;
            match (&col.kind, value) {
                (CovariateKind::Numeric, CovariateValue::Numeric(x)) => row.push(*x),
                (CovariateKind::Categorical { levels }, CovariateValue::Categorical(s)) => {
                    if !levels.contains(s) {
                        return Err(Error::validation(format!(
                            "unknown level '{s}' for covariate '{}'",
                            col.name
                        )));
                    }
                    for level in levels.iter().skip(1) {
                        row.push(if level == s { 1.0 } else { 0.0 });
                    }
                }
                _ => {
                    return Err(Error::validation(format!(
                        "covariate '{}' has mixed numeric/categorical values",
                        col.name
                    )))
                }
            }
        }
        Ok(row)
    }
}

// ---------------------------------------------------------------------------
// Exposure
// ---------------------------------------------------------------------------

/// Dense m x T matrix of exposures in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureMatrix {
    pub m: usize,
    pub t_len: usize,
    e: Vec<f64>,
}

impl ExposureMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        let t_len = rows.first().map_or(0, |r| r.len());
        let mut e = Vec::with_capacity(m * t_len);
        for row in &rows {
            if row.len() != t_len {
                return Err(Error::validation("ragged exposure rows"));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!("exposure {v} outside [0,1]")));
                }
            }
            e.extend_from_slice(row);
        }
        Ok(Self { m, t_len, e })
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.e[i * self.t_len + t]
    }

    pub fn truncated(&self, t_len: usize) -> Self {
        let mut e = Vec::with_capacity(self.m * t_len);
        for i in 0..self.m {
            e.extend_from_slice(&self.e[i * self.t_len..i * self.t_len + t_len]);
        }
        Self { m: self.m, t_len, e }
    }
}

/// Fraction of each grid period covered by the policy's contract.
pub fn compute_exposure(policy: &PolicyRecord, grid: &PeriodGrid) -> Vec<f64> {
    (0..grid.n_periods())
        .map(|t| {
            let ps = grid.period_start(t);
            let pe = grid.period_end(t);
            let lo = policy.coverage_start.max(ps);
            let hi = policy.coverage_end.min(pe);
            if hi <= lo {
                0.0
            } else {
                (hi - lo).num_days() as f64 / (pe - ps).num_days() as f64
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run-off array
// ---------------------------------------------------------------------------

/// Reported claim counts `z[i][t][d]` (occurrence period `t`, lag `d <= d_max`)
/// plus per-cell reported totals. Cells with `t + d > T - 1` are unobserved
/// and always zero. Lags beyond `d_max` live in the spillover tally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOffArray {
    pub m: usize,
    pub t_len: usize,
    pub d_max: usize,
    z: Vec<u32>,
    n_reported: Vec<u32>,
    /// Observed counts with lag > d_max, keyed by (occurrence period, lag).
    pub spillover: BTreeMap<(usize, usize), u32>,
    /// True when every lag of every period is observed (an initializer window
    /// cut from periods `t <= T - D` of a longer horizon).
    pub complete: bool,
}

impl RunOffArray {
    pub fn zeros(m: usize, t_len: usize, d_max: usize) -> Self {
        Self {
            m,
            t_len,
            d_max,
            z: vec![0; m * t_len * (d_max + 1)],
            n_reported: vec![0; m * t_len],
            spillover: BTreeMap::new(),
            complete: false,
        }
    }

    #[inline]
    fn zi(&self, i: usize, t: usize, d: usize) -> usize {
        (i * self.t_len + t) * (self.d_max + 1) + d
    }

    #[inline]
    pub fn z(&self, i: usize, t: usize, d: usize) -> u32 {
        self.z[self.zi(i, t, d)]
    }

    #[inline]
    pub fn n_reported(&self, i: usize, t: usize) -> u32 {
        self.n_reported[i * self.t_len + t]
    }

    pub fn add_claim(&mut self, i: usize, t: usize, d: usize) {
        if d <= self.d_max {
            let idx = self.zi(i, t, d);
            self.z[idx] += 1;
            self.n_reported[i * self.t_len + t] += 1;
        } else {
            *self.spillover.entry((t, d)).or_insert(0) += 1;
        }
    }

    /// Largest observable lag for occurrence period `t`: `min(d_max, T-1-t)`,
    /// or `d_max` when the array is a complete window.
    #[inline]
    pub fn observed_window(&self, t: usize) -> usize {
        if self.complete {
            self.d_max
        } else {
            self.d_max.min(self.t_len - 1 - t)
        }
    }

    /// True when every lag of occurrence period `t` is observed by `tau`.
    #[inline]
    pub fn fully_observed(&self, t: usize) -> bool {
        self.complete || t + self.d_max < self.t_len
    }

    /// Counts by lag `0..=d_max` for one cell.
    #[inline]
    pub fn z_slice(&self, i: usize, t: usize) -> &[u32] {
        let base = (i * self.t_len + t) * (self.d_max + 1);
        &self.z[base..base + self.d_max + 1]
    }

    /// Check `n_reported[i][t] == sum_d z[i][t][d]` for every cell.
    pub fn check_consistency(&self) -> Result<()> {
        for i in 0..self.m {
            for t in 0..self.t_len {
                let w = self.observed_window(t);
                let s: u32 = (0..=w).map(|d| self.z(i, t, d)).sum();
                if s != self.n_reported(i, t) {
                    return Err(Error::validation(format!(
                        "run-off inconsistency at policy {i}, period {t}: sum z = {s}, n_reported = {}",
                        self.n_reported(i, t)
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Delay histogram
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DelayHistogram {
    /// Counts by lag 0..=d_max.
    pub counts: Vec<u64>,
    /// Claims observed with lag > d_max.
    pub spillover: u64,
    /// Percent of total per bucket (lags 0..=d_max, then spillover).
    pub percent: Vec<f64>,
    /// Cumulative percent per bucket.
    pub cumulative: Vec<f64>,
}

/// Lag distribution of claims occurring in the first `up_to` periods.
/// Requires `up_to <= T - d_max` so every lag bucket is fully observed.
pub fn delay_histogram(runoff: &RunOffArray, up_to: usize) -> Result<DelayHistogram> {
    if up_to == 0 || up_to + runoff.d_max > runoff.t_len {
        return Err(Error::validation(format!(
            "up_to must be in [1, T - D] = [1, {}], got {up_to}",
            runoff.t_len.saturating_sub(runoff.d_max)
        )));
    }
    let mut counts = vec![0u64; runoff.d_max + 1];
    for i in 0..runoff.m {
        for t in 0..up_to {
            for (d, c) in counts.iter_mut().enumerate() {
                *c += runoff.z(i, t, d) as u64;
            }
        }
    }
    let spillover: u64 = runoff
        .spillover
        .iter()
        .filter(|((t, _), _)| *t < up_to)
        .map(|(_, &c)| c as u64)
        .sum();
    let total: u64 = counts.iter().sum::<u64>() + spillover;
    let denom = if total == 0 { 1.0 } else { total as f64 };
    let mut percent: Vec<f64> =
        counts.iter().map(|&c| 100.0 * c as f64 / denom).collect();
    percent.push(100.0 * spillover as f64 / denom);
    let mut cumulative = Vec::with_capacity(percent.len());
    let mut acc = 0u64;
    for (&c, _) in counts.iter().zip(percent.iter()) {
        acc += c;
        cumulative.push(100.0 * acc as f64 / denom);
    }
    acc += spillover;
    cumulative.push(100.0 * acc as f64 / denom);
    Ok(DelayHistogram { counts, spillover, percent, cumulative })
}

// ---------------------------------------------------------------------------
// Observed dataset
// ---------------------------------------------------------------------------

/// Everything downstream fitters need: tables, grid, exposure, run-off, and
/// the encoded policy design matrix. Immutable after ingestion.
#[derive(Debug, Clone)]
pub struct ObservedDataset {
    pub policies: Vec<PolicyRecord>,
    pub claims: Vec<ClaimRecord>,
    /// Policy index of each claim (parallel to `claims`).
    pub claim_policy: Vec<usize>,
    pub grid: PeriodGrid,
    pub exposure: ExposureMatrix,
    pub runoff: RunOffArray,
    pub schema: CovariateSchema,
    /// Intercept + encoded covariates, one row per policy.
    pub policy_design: DesignMatrix,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Optional bin edges per numeric covariate; a binned covariate becomes
    /// categorical with levels `bin0..binK`.
    pub numeric_bins: BTreeMap<String, Vec<f64>>,
}

impl ObservedDataset {
    pub fn m(&self) -> usize {
        self.policies.len()
    }

    pub fn t_len(&self) -> usize {
        self.grid.n_periods()
    }

    pub fn d_max(&self) -> usize {
        self.runoff.d_max
    }

    /// Re-censor the dataset at the end of period `t_len` (a shorter horizon).
    pub fn censored_at(&self, t_len: usize) -> Result<ObservedDataset> {
        let grid = self.grid.truncated(t_len)?;
        let runoff = build_runoff(
            &grid,
            self.d_max(),
            self.m(),
            self.claims.iter().zip(self.claim_policy.iter().copied()),
        )?;
        Ok(ObservedDataset {
            policies: self.policies.clone(),
            claims: self.claims.clone(),
            claim_policy: self.claim_policy.clone(),
            exposure: self.exposure.truncated(t_len),
            runoff,
            grid,
            schema: self.schema.clone(),
            policy_design: self.policy_design.clone(),
        })
    }

    /// First `t_keep` periods with their *full* lag information (reports
    /// observed through the original tau). Used to initialize fits on the
    /// completely observed window `t <= T - D`.
    pub fn initial_window(&self, t_keep: usize) -> Result<ObservedDataset> {
        let grid = self.grid.truncated(t_keep)?;
        let mut runoff = RunOffArray::zeros(self.m(), t_keep, self.d_max());
        runoff.complete = true;
        let tau_full = self.grid.tau();
        for (claim, &i) in self.claims.iter().zip(&self.claim_policy) {
            if claim.report_date >= tau_full {
                continue;
            }
            let Some(t) = self.grid.period_of(claim.occurrence_date) else {
                continue;
            };
            if t >= t_keep {
                continue;
            }
            let d = self.grid.extended_period_of(claim.report_date) - t as i64;
            runoff.add_claim(i, t, d as usize);
        }
        Ok(ObservedDataset {
            policies: self.policies.clone(),
            claims: self.claims.clone(),
            claim_policy: self.claim_policy.clone(),
            exposure: self.exposure.truncated(t_keep),
            runoff,
            grid,
            schema: self.schema.clone(),
            policy_design: self.policy_design.clone(),
        })
    }

    /// Actual IBNR claim count at the end of period `t_len`: claims occurring
    /// within the horizon, reported on/after its valuation date, lag <= D.
    pub fn actual_ibnr_at(&self, t_len: usize) -> Result<u64> {
        let grid = self.grid.truncated(t_len)?;
        let tau = grid.tau();
        let d_max = self.d_max() as i64;
        let mut count = 0u64;
        for claim in &self.claims {
            if claim.occurrence_date < tau && claim.report_date >= tau {
                let t = grid
                    .period_of(claim.occurrence_date)
                    .map(|t| t as i64)
                    .unwrap_or(-1);
                if t < 0 {
                    continue;
                }
                let r = grid.extended_period_of(claim.report_date);
                if r - t <= d_max {
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Summary emitted by the CLI: dimensions, claim counts, delay histogram.
    pub fn summary_json(&self) -> serde_json::Value {
        let up_to = self.t_len().saturating_sub(self.d_max());
        let hist = if up_to >= 1 { delay_histogram(&self.runoff, up_to).ok() } else { None };
        let reported: u64 = self
            .claims
            .iter()
            .filter(|c| c.report_date < self.grid.tau())
            .count() as u64;
        serde_json::json!({
            "m": self.m(),
            "t_len": self.t_len(),
            "d_max": self.d_max(),
            "granularity": self.grid.granularity,
            "tau": self.grid.tau(),
            "claims_total": self.claims.len(),
            "claims_reported": reported,
            "delay_histogram": hist,
        })
    }
}

fn build_runoff<'a>(
    grid: &PeriodGrid,
    d_max: usize,
    m: usize,
    claims: impl Iterator<Item = (&'a ClaimRecord, usize)>,
) -> Result<RunOffArray> {
    let mut runoff = RunOffArray::zeros(m, grid.n_periods(), d_max);
    for (claim, i) in claims {
        if claim.report_date >= grid.tau() {
            continue; // unreported at this valuation date
        }
        let Some(t) = grid.period_of(claim.occurrence_date) else {
            continue; // outside the horizon
        };
        let r = grid.extended_period_of(claim.report_date);
        let d = r - t as i64;
        debug_assert!(d >= 0);
        runoff.add_claim(i, t, d as usize);
    }
    Ok(runoff)
}

/// Infer the covariate schema from the policies' raw values.
fn infer_schema(
    names: &[String],
    policies: &[PolicyRecord],
) -> Result<CovariateSchema> {
    let mut columns = Vec::new();
    for name in names {
        let mut all_numeric = true;
        let mut levels: Vec<String> = Vec::new();
        for p in policies {
            match p.covariates.get(name) {
                Some(CovariateValue::Numeric(_)) => {}
                Some(CovariateValue::Categorical(s)) => {
                    all_numeric = false;
                    if !levels.contains(s) {
                        levels.push(s.clone());
                    }
                }
                None => {
                    return Err(Error::validation(format!(
                        "policy '{}' is missing covariate '{}'",
                        p.policy_id, name
                    )))
                }
            }
        }
        let kind = if all_numeric {
            CovariateKind::Numeric
        } else {
            levels.sort();
            CovariateKind::Categorical { levels }
        };
        columns.push(CovariateColumn { name: name.clone(), kind });
    }
    Ok(CovariateSchema { columns })
}

fn bin_label(edges: &[f64], x: f64) -> String {
    let k = edges.iter().filter(|&&e| x >= e).count();
    format!("bin{k}")
}

/// Assemble an `ObservedDataset` from in-memory tables.
pub fn assemble(
    mut policies: Vec<PolicyRecord>,
    claims: Vec<ClaimRecord>,
    grid: PeriodGrid,
    d_max: usize,
    options: &IngestOptions,
) -> Result<ObservedDataset> {
    grid.validate()?;
    if policies.is_empty() {
        return Err(Error::validation("no policies"));
    }
    let cov_names: Vec<String> = policies[0].covariates.keys().cloned().collect();
    for p in &policies {
        if p.coverage_start >= p.coverage_end {
            return Err(Error::validation(format!(
                "policy '{}': coverage_start must precede coverage_end",
                p.policy_id
            )));
        }
    }
    // Apply configured numeric binning before schema inference.
    if !options.numeric_bins.is_empty() {
        for p in &mut policies {
            for (name, edges) in &options.numeric_bins {
                if let Some(CovariateValue::Numeric(x)) = p.covariates.get(name).cloned() {
                    p.covariates
                        .insert(name.clone(), CovariateValue::Categorical(bin_label(edges, x)));
                }
            }
        }
    }
    let schema = infer_schema(&cov_names, &policies)?;

    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in policies.iter().enumerate() {
        if index.insert(p.policy_id.as_str(), i).is_some() {
            return Err(Error::validation(format!("duplicate policy_id '{}'", p.policy_id)));
        }
    }
    let mut claim_policy = Vec::with_capacity(claims.len());
    for (row, claim) in claims.iter().enumerate() {
        let Some(&i) = index.get(claim.policy_id.as_str()) else {
            return Err(Error::validation(format!(
                "claims row {}: unknown policy_id '{}'",
                row + 1,
                claim.policy_id
            )));
        };
        if claim.report_date < claim.occurrence_date {
            return Err(Error::validation(format!(
                "claims row {}: report_date precedes occurrence_date",
                row + 1
            )));
        }
        claim_policy.push(i);
    }

    let exposure = ExposureMatrix::from_rows(
        policies.iter().map(|p| compute_exposure(p, &grid)).collect(),
    )?;
    let runoff = build_runoff(
        &grid,
        d_max,
        policies.len(),
        claims.iter().zip(claim_policy.iter().copied()),
    )?;
    runoff.check_consistency()?;

    let names = schema.encoded_names();
    let mut rows = Vec::with_capacity(policies.len());
    for p in &policies {
        let mut row = vec![1.0];
        row.extend(schema.encode(&p.covariates)?);
        rows.push(row);
    }
    let mut col_names = vec!["(intercept)".to_string()];
    col_names.extend(names);
    let policy_design = DesignMatrix::new(rows, col_names)?;

    Ok(ObservedDataset {
        policies,
        claims,
        claim_policy,
        grid,
        exposure,
        runoff,
        schema,
        policy_design,
    })
}

/// Read the policy and claim CSV files and assemble the dataset.
///
/// `policies.csv` header: `policy_id,start_date,end_date,<covariates...>`;
/// `claims.csv` header: `policy_id,occurrence_date,report_date`; dates are
/// ISO-8601.
pub fn ingest(
    policies_csv: &Path,
    claims_csv: &Path,
    grid: PeriodGrid,
    d_max: usize,
    options: &IngestOptions,
) -> Result<ObservedDataset> {
    let policies = read_policies_csv(policies_csv)?;
    let claims = read_claims_csv(claims_csv)?;
    assemble(policies, claims, grid, d_max, options)
}

pub fn read_policies_csv(path: &Path) -> Result<Vec<PolicyRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let fixed = ["policy_id", "start_date", "end_date"];
    if headers.len() < 3 || headers.iter().take(3).ne(fixed) {
        return Err(Error::validation(
            "policies.csv must start with columns policy_id,start_date,end_date",
        ));
    }
    let cov_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut policies = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse_date = |s: &str, what: &str| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| {
                Error::validation(format!("policies row {}: bad {what} '{s}'", row + 1))
            })
        };
        let mut covariates = BTreeMap::new();
        for (name, raw) in cov_names.iter().zip(record.iter().skip(3)) {
            let value = match raw.parse::<f64>() {
                Ok(x) if raw.trim() != "" => CovariateValue::Numeric(x),
                _ => CovariateValue::Categorical(raw.to_string()),
            };
            covariates.insert(name.clone(), value);
        }
        policies.push(PolicyRecord {
            policy_id: record[0].to_string(),
            coverage_start: parse_date(&record[1], "start_date")?,
            coverage_end: parse_date(&record[2], "end_date")?,
            covariates,
        });
    }
    Ok(policies)
}

pub fn read_claims_csv(path: &Path) -> Result<Vec<ClaimRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["policy_id", "occurrence_date", "report_date"];
    if headers.iter().take(3).ne(expected) {
        return Err(Error::validation(
            "claims.csv must have columns policy_id,occurrence_date,report_date",
        ));
    }
    let mut claims = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse_date = |s: &str, what: &str| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| {
                Error::validation(format!("claims row {}: bad {what} '{s}'", row + 1))
            })
        };
        claims.push(ClaimRecord {
            policy_id: record[0].to_string(),
            occurrence_date: parse_date(&record[1], "occurrence_date")?,
            report_date: parse_date(&record[2], "report_date")?,
        });
    }
    Ok(claims)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn one_policy(start: &str, end: &str) -> PolicyRecord {
        PolicyRecord {
            policy_id: "p1".into(),
            coverage_start: date(start),
            coverage_end: date(end),
            covariates: BTreeMap::new(),
        }
    }

    #[test]
    fn exposure_full_partial_zero() {
        let grid = PeriodGrid::new(date("2015-04-01"), 3, Granularity::Monthly).unwrap();
        // Full coverage of April.
        let e = compute_exposure(&one_policy("2015-01-01", "2016-01-01"), &grid);
        assert_eq!(e[0], 1.0);
        // 15 of April's 30 days.
        let e = compute_exposure(&one_policy("2015-04-16", "2015-05-01"), &grid);
        assert!((e[0] - 0.5).abs() < 1e-12);
        // Inactive.
        let e = compute_exposure(&one_policy("2016-03-01", "2016-06-01"), &grid);
        assert_eq!(e, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn exposure_days_add_up() {
        let grid = PeriodGrid::new(date("2015-01-01"), 12, Granularity::Monthly).unwrap();
        let p = one_policy("2015-03-10", "2015-11-21");
        let e = compute_exposure(&p, &grid);
        let covered: f64 = (0..12).map(|t| e[t] * grid.period_len_days(t) as f64).sum();
        let total = (p.coverage_end - p.coverage_start).num_days() as f64;
        assert!((covered - total).abs() < 1e-9);
        assert!(e.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_claim_identity() {
        let grid = PeriodGrid::new(date("2015-01-01"), 12, Granularity::Monthly).unwrap();
        let policies = vec![one_policy("2015-01-01", "2016-01-01")];
        let claims = vec![ClaimRecord {
            policy_id: "p1".into(),
            occurrence_date: date("2015-03-10"),
            report_date: date("2015-03-20"),
        }];
        let ds = assemble(policies, claims, grid, 3, &IngestOptions::default()).unwrap();
        assert_eq!(ds.runoff.z(0, 2, 0), 1);
        assert_eq!(ds.runoff.n_reported(0, 2), 1);
    }

    #[test]
    fn lag_three_increments_single_cell() {
        let grid = PeriodGrid::new(date("2015-01-01"), 12, Granularity::Monthly).unwrap();
        let policies = vec![one_policy("2015-01-01", "2016-01-01")];
        let claims = vec![ClaimRecord {
            policy_id: "p1".into(),
            occurrence_date: date("2015-02-15"),
            report_date: date("2015-05-02"),
        }];
        let ds = assemble(policies, claims, grid, 5, &IngestOptions::default()).unwrap();
        for t in 0..12 {
            for d in 0..=5 {
                let expect = u32::from(t == 1 && d == 3);
                assert_eq!(ds.runoff.z(0, t, d), expect, "t={t} d={d}");
            }
        }
    }

    #[test]
    fn unknown_policy_rejected_with_row() {
        let grid = PeriodGrid::new(date("2015-01-01"), 2, Granularity::Monthly).unwrap();
        let policies = vec![one_policy("2015-01-01", "2016-01-01")];
        let claims = vec![
            ClaimRecord {
                policy_id: "p1".into(),
                occurrence_date: date("2015-01-02"),
                report_date: date("2015-01-03"),
            },
            ClaimRecord {
                policy_id: "ghost".into(),
                occurrence_date: date("2015-01-02"),
                report_date: date("2015-01-03"),
            },
        ];
        let err = assemble(policies, claims, grid, 1, &IngestOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("ghost"), "{msg}");
    }

    #[test]
    fn non_monotone_claim_dates_rejected() {
        let grid = PeriodGrid::new(date("2015-01-01"), 2, Granularity::Monthly).unwrap();
        let policies = vec![one_policy("2015-01-01", "2016-01-01")];
        let claims = vec![ClaimRecord {
            policy_id: "p1".into(),
            occurrence_date: date("2015-01-10"),
            report_date: date("2015-01-03"),
        }];
        assert!(assemble(policies, claims, grid, 1, &IngestOptions::default()).is_err());
    }

    #[test]
    fn spillover_and_censoring() {
        let grid = PeriodGrid::new(date("2015-01-01"), 12, Granularity::Monthly).unwrap();
        let policies = vec![one_policy("2015-01-01", "2016-01-01")];
        let claims = vec![
            // Lag 4 > D=2: spillover.
            ClaimRecord {
                policy_id: "p1".into(),
                occurrence_date: date("2015-01-10"),
                report_date: date("2015-05-03"),
            },
            // Reported after tau: ignored by the run-off.
            ClaimRecord {
                policy_id: "p1".into(),
                occurrence_date: date("2015-12-10"),
                report_date: date("2016-02-01"),
            },
        ];
        let ds = assemble(policies, claims, grid, 2, &IngestOptions::default()).unwrap();
        assert_eq!(ds.runoff.spillover.get(&(0, 4)), Some(&1));
        assert_eq!(ds.runoff.n_reported(0, 0), 0);
        assert_eq!(ds.runoff.n_reported(0, 11), 0);
        assert_eq!(ds.actual_ibnr_at(12).unwrap(), 1);
    }

    #[test]
    fn histogram_all_lag_zero_and_mixed() {
        let mut runoff = RunOffArray::zeros(1, 10, 5);
        runoff.add_claim(0, 0, 0);
        runoff.add_claim(0, 1, 0);
        let h = delay_histogram(&runoff, 5).unwrap();
        assert_eq!(h.percent[0], 100.0);
        assert!(h.percent[1..].iter().all(|&p| p == 0.0));

        let mut runoff = RunOffArray::zeros(1, 10, 5);
        runoff.add_claim(0, 0, 0);
        runoff.add_claim(0, 1, 5);
        let h = delay_histogram(&runoff, 5).unwrap();
        assert_eq!(h.percent[0], 50.0);
        assert_eq!(h.percent[5], 50.0);
        assert_eq!(h.cumulative[5], 100.0);
    }

    #[test]
    fn histogram_rejects_censored_window() {
        let runoff = RunOffArray::zeros(1, 10, 4);
        assert!(delay_histogram(&runoff, 7).is_err());
        assert!(delay_histogram(&runoff, 6).is_ok());
    }

    #[test]
    fn boundary_claim_goes_right() {
        // Occurrence exactly on a boundary belongs to the period it opens.
        let grid = PeriodGrid::new(date("2015-01-01"), 3, Granularity::Monthly).unwrap();
        assert_eq!(grid.period_of(date("2015-02-01")), Some(1));
        assert_eq!(grid.period_of(date("2015-01-31")), Some(0));
        // tau itself is outside the horizon.
        assert_eq!(grid.period_of(date("2015-04-01")), None);
    }

    #[test]
    fn numeric_binning() {
        let grid = PeriodGrid::new(date("2015-01-01"), 2, Granularity::Monthly).unwrap();
        let mut p1 = one_policy("2015-01-01", "2016-01-01");
        p1.covariates.insert("age".into(), CovariateValue::Numeric(25.0));
        let mut p2 = p1.clone();
        p2.policy_id = "p2".into();
        p2.covariates.insert("age".into(), CovariateValue::Numeric(60.0));
        let mut opts = IngestOptions::default();
        opts.numeric_bins.insert("age".into(), vec![30.0, 50.0]);
        let ds = assemble(vec![p1, p2], vec![], grid, 1, &opts).unwrap();
        match &ds.schema.columns[0].kind {
            CovariateKind::Categorical { levels } => {
                assert_eq!(levels, &vec!["bin0".to_string(), "bin2".to_string()]);
            }
            _ => panic!("expected binned categorical"),
        }
    }
}
