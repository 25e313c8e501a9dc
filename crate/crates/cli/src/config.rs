//! Run configuration: one TOML file with a section per pipeline stage, plus
//! `IBNRCOX_<SECTION>_<KEY>` environment overrides for scalar values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::Deserialize;

use ibnrcox::data::Granularity;
use ibnrcox::delay::continuous::{DelayFeatureSpec, TruncationMode};
use ibnrcox::em::{Criterion, DelayTimeFeatures, FitOptions, ModelFamily};
use ibnrcox::ibnr::StatePathMode;
use ibnrcox::glm::Link;
use ibnrcox::hmm::HmmParams;
use ibnrcox::synth::{DelayTruth, ExposurePattern, ScenarioConfig};

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: Option<SimulateConfig>,
    pub fit: Option<FitConfig>,
    pub predict: Option<PredictConfig>,
    pub evaluate: Option<EvaluateConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub out_dir: PathBuf,
    pub m: usize,
    pub periods: usize,
    pub d_max: usize,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    pub start_date: NaiveDate,
    #[serde(default)]
    pub seed: u64,
    pub pi1: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    #[serde(default = "default_true")]
    pub covariates: bool,
    #[serde(default = "default_exposure")]
    pub exposure: ExposurePattern,
    pub delay: DelayTruthConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DelayTruthConfig {
    Multinomial { p: Vec<f64> },
    Dirichlet { eta: Vec<f64> },
    LogLogistic { scale_days: f64, shape: f64 },
}

#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub data_dir: PathBuf,
    pub periods: usize,
    pub d_max: usize,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    pub start_date: NaiveDate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(flatten)]
    pub dataset: DatasetConfig,
    pub model: String,
    #[serde(default)]
    pub g: Option<usize>,
    #[serde(default)]
    pub g_max: Option<usize>,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    pub out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub rel_distance_threshold: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub mc_double_after: Option<usize>,
    #[serde(default = "default_link")]
    pub link_d1: Link,
    #[serde(default = "default_time_features")]
    pub delay_time_features: DelayTimeFeatures,
    #[serde(default = "default_cm_mode")]
    pub cm_delay_mode: TruncationMode,
    #[serde(default = "default_true")]
    pub cm_month_feature: bool,
    #[serde(default = "default_true")]
    pub cm_weekday_feature: bool,
    #[serde(default = "default_refine")]
    pub quadrature_refine: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    #[serde(flatten)]
    pub dataset: DatasetConfig,
    /// Fitted-model JSON; omit for the Chain Ladder baseline.
    pub model: Option<PathBuf>,
    /// Family when no model artifact is needed ("cl").
    pub family: Option<String>,
    /// Valuation dates; each must be a period boundary of the grid.
    pub dates: Vec<NaiveDate>,
    #[serde(default = "default_n_sims")]
    pub n_sims: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub plot_out: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub draws_out: Option<PathBuf>,
    /// Viterbi (default) or posterior-sampled state paths in the simulation.
    #[serde(default)]
    pub state_path: StatePathMode,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub results: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}
fn default_granularity() -> Granularity {
    Granularity::Monthly
}
fn default_exposure() -> ExposurePattern {
    ExposurePattern::Full
}
fn default_criterion() -> Criterion {
    Criterion::Aic
}
fn default_threshold() -> f64 {
    1e-4
}
fn default_max_iterations() -> usize {
    200
}
fn default_mc_samples() -> usize {
    200
}
fn default_link() -> Link {
    Link::Logit
}
fn default_time_features() -> DelayTimeFeatures {
    DelayTimeFeatures::None
}
fn default_cm_mode() -> TruncationMode {
    TruncationMode::Truncated
}
fn default_refine() -> usize {
    1
}
fn default_n_sims() -> usize {
    1000
}

impl SimulateConfig {
    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let delay = match &self.delay {
            DelayTruthConfig::Multinomial { p } => DelayTruth::Multinomial { p: p.clone() },
            DelayTruthConfig::Dirichlet { eta } => DelayTruth::Dirichlet { eta: eta.clone() },
            DelayTruthConfig::LogLogistic { scale_days, shape } => {
                DelayTruth::LogLogistic { scale_days: *scale_days, shape: *shape }
            }
        };
        Ok(ScenarioConfig {
            m: self.m,
            t_len: self.periods,
            d_max: self.d_max,
            granularity: self.granularity,
            start_date: self.start_date,
            hmm: HmmParams { pi1: self.pi1.clone(), gamma: self.gamma.clone() },
            theta: self.theta.clone(),
            covariates: self.covariates,
            delay,
            exposure: self.exposure,
            seed: self.seed,
        })
    }
}

impl FitConfig {
    pub fn family(&self) -> Result<Option<ModelFamily>> {
        match self.model.as_str() {
            "mm" => Ok(Some(ModelFamily::Mm)),
            "dm" => Ok(Some(ModelFamily::Dm)),
            "cm" => Ok(Some(ModelFamily::Cm)),
            "cl" => Ok(None),
            other => bail!("unknown model '{other}' (expected cm, mm, dm, or cl)"),
        }
    }

    pub fn fit_options(&self, g: usize) -> FitOptions {
        FitOptions {
            g,
            rel_distance_threshold: self.rel_distance_threshold,
            max_iterations: self.max_iterations,
            mc_samples: self.mc_samples,
            mc_double_after: self.mc_double_after,
            seed: self.seed,
            link_d1: self.link_d1,
            delay_time_features: self.delay_time_features,
            cm_delay_features: DelayFeatureSpec {
                month: self.cm_month_feature,
                weekday: self.cm_weekday_feature,
            },
            cm_delay_mode: self.cm_delay_mode,
            quadrature_refine: self.quadrature_refine,
        }
    }
}

/// Parse the config file, applying `IBNRCOX_<SECTION>_<KEY>` environment
/// overrides to scalar values before deserialization.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: toml::Value =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    apply_env_overrides(&mut value)?;
    value.try_into().context("interpreting config")
}

fn apply_env_overrides(value: &mut toml::Value) -> Result<()> {
    let Some(table) = value.as_table_mut() else {
        return Ok(());
    };
    for (section, body) in table.iter_mut() {
        let Some(body) = body.as_table_mut() else { continue };
        let keys: Vec<String> = body.keys().cloned().collect();
        for key in keys {
            let var = format!(
                "IBNRCOX_{}_{}",
                section.to_uppercase(),
                key.to_uppercase()
            );
            if let Ok(raw) = std::env::var(&var) {
                let parsed = parse_scalar(&raw, &body[&key])
                    .with_context(|| format!("parsing override {var}={raw}"))?;
                body.insert(key, parsed);
            }
        }
    }
    Ok(())
}

fn parse_scalar(raw: &str, current: &toml::Value) -> Result<toml::Value> {
    Ok(match current {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse()?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse()?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse()?),
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Datetime(_) => toml::Value::Datetime(raw.parse()?),
        _ => bail!("only scalar config values can be overridden from the environment"),
    })
}
