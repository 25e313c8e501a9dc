//! Command-line pipeline: `simulate` a portfolio, `fit` a reserving model,
//! `predict` IBNR claim-count distributions at valuation dates, and
//! `evaluate` several models against the realized counts.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{load_config, FitConfig, PredictConfig, RunConfig};
use ibnrcox::data::{ingest, IngestOptions, ObservedDataset, PeriodGrid};
use ibnrcox::em::{self, ModelArtifact};
use ibnrcox::ibnr::{
    chain_ladder, evaluate, simulate_ibnr_with, tail_beyond_d, DatePrediction,
    EvaluationMetrics, RunOffTriangle,
};
use ibnrcox::synth::{generate, read_truth, write_scenario};

#[derive(Parser)]
#[command(name = "ibnrcox", about = "IBNR claim-count reserving engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic portfolio (policies.csv, claims.csv, truth.json).
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit a reserving model and write the parameter artifact.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the configured model family (cm, mm, dm, cl).
        #[arg(long)]
        model: Option<String>,
        /// Override the configured state count.
        #[arg(long)]
        g: Option<usize>,
        /// Exit 0 even when the fit did not meet its convergence criterion.
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Simulate IBNR distributions at valuation dates from a fitted model.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the model family for artifact-free baselines (cl).
        #[arg(long)]
        model: Option<String>,
        /// Also write every simulation draw to <out>.draws.csv.
        #[arg(long)]
        emit_draws: bool,
        /// Add the empirical beyond-window tail estimate to each date.
        #[arg(long)]
        include_tail: bool,
    },
    /// Compare result files against realized counts (Table-style CSV).
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    if let Some(e) = err.downcast_ref::<ibnrcox::Error>() {
        return match e {
            ibnrcox::Error::Validation(_) => ExitCode::from(2),
            ibnrcox::Error::NonConvergence(_) => ExitCode::from(3),
            ibnrcox::Error::Io(_) | ibnrcox::Error::Csv(_) | ibnrcox::Error::Json(_) => {
                ExitCode::from(4)
            }
            ibnrcox::Error::Computation(_) => ExitCode::from(1),
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return ExitCode::from(4);
    }
    ExitCode::from(2)
}

fn setup_workers(workers: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { common } => {
            setup_workers(common.workers)?;
            let config = load_config(&common.config)?;
            cmd_simulate(config, common.seed)
        }
        Command::Fit { common, model, g, allow_nonconverged } => {
            setup_workers(common.workers)?;
            let config = load_config(&common.config)?;
            cmd_fit(config, common.seed, model, g, allow_nonconverged)
        }
        Command::Predict { common, model, emit_draws, include_tail } => {
            setup_workers(common.workers)?;
            let config = load_config(&common.config)?;
            cmd_predict(config, common.seed, model, emit_draws, include_tail)
        }
        Command::Evaluate { common } => {
            setup_workers(common.workers)?;
            let config = load_config(&common.config)?;
            cmd_evaluate(config)
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(config: RunConfig, seed: Option<u64>) -> Result<ExitCode> {
    let mut section = config
        .simulate
        .ok_or_else(|| anyhow!("config has no [simulate] section"))?;
    if let Some(s) = seed {
        section.seed = s;
    }
    let scenario = section.scenario()?;
    let (dataset, truth) = generate(&scenario)?;
    write_scenario(&dataset, &truth, &section.out_dir)?;
    let summary = dataset.summary_json();
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn load_dataset(ds: &config::DatasetConfig) -> Result<ObservedDataset> {
    let grid = PeriodGrid::new(ds.start_date, ds.periods, ds.granularity)?;
    let dataset = ingest(
        &ds.data_dir.join("policies.csv"),
        &ds.data_dir.join("claims.csv"),
        grid,
        ds.d_max,
        &IngestOptions::default(),
    )?;
    Ok(dataset)
}

fn cmd_fit(
    config: RunConfig,
    seed: Option<u64>,
    model_override: Option<String>,
    g_override: Option<usize>,
    allow_nonconverged: bool,
) -> Result<ExitCode> {
    let mut section: FitConfig =
        config.fit.ok_or_else(|| anyhow!("config has no [fit] section"))?;
    if let Some(s) = seed {
        section.seed = s;
    }
    if let Some(m) = model_override {
        section.model = m;
    }
    if let Some(g) = g_override {
        section.g = Some(g);
    }
    let dataset = load_dataset(&section.dataset)?;

    let Some(family) = section.family()? else {
        // Chain Ladder: no fitted artifact, triangle summary only.
        let triangle = RunOffTriangle::from_runoff(&dataset.runoff);
        let result = chain_ladder(&triangle)?;
        let summary = serde_json::json!({
            "model": "cl",
            "development_factors": result.development_factors,
            "ibnr": result.ibnr,
            "warnings": result.warnings,
        });
        if let Some(out) = &section.out {
            write_atomic(out, serde_json::to_string_pretty(&summary)?.as_bytes())?;
        }
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(ExitCode::SUCCESS);
    };

    let fit = if let Some(g_max) = section.g_max {
        let options = section.fit_options(g_max);
        let selection = em::select_g(&dataset, family, g_max, section.criterion, &options)?;
        eprintln!(
            "model selection chose g = {} out of g_max = {g_max}",
            selection.chosen_g
        );
        selection.fits.into_iter().nth(selection.chosen_index).unwrap()
    } else {
        let g = section.g.ok_or_else(|| anyhow!("fit needs g or g_max"))?;
        let options = section.fit_options(g);
        em::fit(&dataset, family, &options)?
    };

    let options = section.fit_options(fit.params.g());
    let artifact = ModelArtifact::from_fit(&fit, &dataset, &options);
    let out = section
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("model_{}.json", artifact.family)));
    write_atomic(&out, serde_json::to_string_pretty(&artifact)?.as_bytes())?;
    if let Some(trace_out) = &section.trace_out {
        let mut w = csv::Writer::from_path(trace_out)?;
        w.write_record(["iteration", "loglik"])?;
        for (k, ll) in fit.loglik_trace.iter().enumerate() {
            w.write_record([k.to_string(), format!("{ll:.10}")])?;
        }
        w.flush()?;
    }
    eprintln!(
        "fit {}: g={} iterations={} converged={} loglik={:.4} aic={:.2} bic={:.2} -> {}",
        artifact.family,
        artifact.g,
        fit.iterations,
        fit.converged,
        fit.final_loglik(),
        fit.aic,
        fit.bic,
        out.display()
    );
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    if !fit.converged && !allow_nonconverged {
        return Err(ibnrcox::Error::NonConvergence(format!(
            "fit stopped after {} iterations above the relative-distance threshold \
             (rerun with --allow-nonconverged to keep exit code 0)",
            fit.iterations
        ))
        .into());
    }
    Ok(ExitCode::SUCCESS)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct PredictionReport {
    model: String,
    g: Option<usize>,
    n_sims: usize,
    seed: u64,
    include_tail: bool,
    dates: Vec<DatePrediction>,
    metrics: Option<EvaluationMetrics>,
}

fn cmd_predict(
    config: RunConfig,
    seed: Option<u64>,
    model_override: Option<String>,
    emit_draws: bool,
    include_tail: bool,
) -> Result<ExitCode> {
    let mut section: PredictConfig =
        config.predict.ok_or_else(|| anyhow!("config has no [predict] section"))?;
    if let Some(s) = seed {
        section.seed = s;
    }
    if let Some(m) = model_override {
        if m == "cl" {
            section.model = None; // the baseline needs no fitted artifact
        }
        section.family = Some(m);
    }
    let dataset = load_dataset(&section.dataset)?;
    let truth = section.truth.as_deref().map(read_truth).transpose()?;

    let artifact: Option<ModelArtifact> = match &section.model {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading model {}", path.display()))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let family_name = match (&artifact, section.family.as_deref()) {
        (Some(a), _) => a.family.clone(),
        (None, Some("cl")) => "cl".to_string(),
        (None, Some(other)) => bail!("family '{other}' needs a fitted model artifact"),
        (None, None) => bail!("predict needs either a model artifact or family = \"cl\""),
    };
    if let Some(a) = &artifact {
        if a.frequency_names != dataset.policy_design.names {
            bail!(
                "model/dataset mismatch: model covariates {:?} vs dataset {:?}",
                a.frequency_names,
                dataset.policy_design.names
            );
        }
        if a.d_max != dataset.d_max() {
            bail!(
                "model/dataset mismatch: model D = {}, dataset D = {}",
                a.d_max,
                dataset.d_max()
            );
        }
    }

    let mut dates = Vec::with_capacity(section.dates.len());
    let mut all_draws: Vec<(chrono::NaiveDate, Vec<u64>)> = Vec::new();
    for &date in &section.dates {
        let t_len = dataset
            .grid
            .boundaries
            .iter()
            .position(|&b| b == date)
            .ok_or_else(|| anyhow!("valuation date {date} is not a period boundary"))?;
        if t_len < 2 {
            bail!("valuation date {date} leaves fewer than two periods");
        }
        let censored = dataset.censored_at(t_len)?;
        let actual = match &truth {
            Some(t) => Some(t.ibnr_at(t_len, dataset.d_max())?),
            None => Some(dataset.actual_ibnr_at(t_len)?),
        };
        // Only the beyond-D component is added: the model's own simulation
        // already covers unreported in-window lags.
        let tail = include_tail.then(|| tail_beyond_d(&censored.runoff).beyond_d);

        let (mut point, mut lower, mut upper, draws) = match &artifact {
            None => {
                let triangle = RunOffTriangle::from_runoff(&censored.runoff);
                let result = chain_ladder(&triangle)?;
                (result.ibnr, result.ibnr, result.ibnr, Vec::new())
            }
            Some(a) => {
                // Distinct deterministic stream per valuation date.
                let date_seed =
                    section.seed.wrapping_add((t_len as u64).wrapping_mul(0x9E37_79B9));
                let estimate = simulate_ibnr_with(
                    &censored,
                    &a.params,
                    &a.options,
                    section.n_sims,
                    date_seed,
                    section.state_path,
                )?;
                (estimate.point_estimate, estimate.lower, estimate.upper, estimate.draws)
            }
        };
        if let Some(t) = tail {
            point += t;
            lower += t;
            upper += t;
        }
        let ape = actual
            .and_then(|a| (a > 0).then(|| (point - a as f64).abs() / a as f64));
        dates.push(DatePrediction { date, point, lower, upper, actual, ape });
        if emit_draws {
            all_draws.push((date, draws));
        }
    }

    let metrics = evaluate(&dates).ok();
    let report = PredictionReport {
        model: family_name,
        g: artifact.as_ref().map(|a| a.g),
        n_sims: section.n_sims,
        seed: section.seed,
        include_tail,
        dates,
        metrics,
    };
    let out = section
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("results_{}.json", report.model)));
    write_atomic(&out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    if let Some(plot_out) = &section.plot_out {
        let mut w = csv::Writer::from_path(plot_out)?;
        w.write_record(["date", "point", "lower", "upper", "actual"])?;
        for d in &report.dates {
            w.write_record([
                d.date.to_string(),
                format!("{:.4}", d.point),
                format!("{:.4}", d.lower),
                format!("{:.4}", d.upper),
                d.actual.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    if emit_draws {
        let draws_path = section
            .draws_out
            .clone()
            .unwrap_or_else(|| out.with_extension("draws.csv"));
        let mut w = csv::Writer::from_path(&draws_path)?;
        w.write_record(["date", "draw", "ibnr"])?;
        for (date, draws) in &all_draws {
            for (k, v) in draws.iter().enumerate() {
                w.write_record([date.to_string(), k.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
    }
    eprintln!("predict {}: {} dates -> {}", report.model, report.dates.len(), out.display());
    println!("{}", serde_json::to_string_pretty(&report.dates)?);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(config: RunConfig) -> Result<ExitCode> {
    let section = config
        .evaluate
        .ok_or_else(|| anyhow!("config has no [evaluate] section"))?;
    let mut reports = Vec::new();
    for path in &section.results {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading results {}", path.display()))?;
        let report: PredictionReport = serde_json::from_str(&text)?;
        reports.push(report);
    }
    if reports.is_empty() {
        bail!("no result files given");
    }
    // Valuation dates must agree across models.
    let dates: Vec<chrono::NaiveDate> = reports[0].dates.iter().map(|d| d.date).collect();
    for r in &reports[1..] {
        let other: Vec<chrono::NaiveDate> = r.dates.iter().map(|d| d.date).collect();
        if other != dates {
            bail!("result files cover different valuation dates");
        }
    }
    // Canonical column order: cl, cm, mm, dm, then anything else.
    let rank = |name: &str| match name {
        "cl" => 0,
        "cm" => 1,
        "mm" => 2,
        "dm" => 3,
        _ => 4,
    };
    reports.sort_by_key(|r| rank(&r.model));

    let metrics: Vec<EvaluationMetrics> = reports
        .iter()
        .map(|r| evaluate(&r.dates))
        .collect::<ibnrcox::Result<_>>()?;
    let mut header = vec!["metric".to_string()];
    for r in &reports {
        header.push(r.model.clone());
    }
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut push_row = |name: &str, f: &dyn Fn(&EvaluationMetrics) -> String| {
        let mut row = vec![name.to_string()];
        for m in &metrics {
            row.push(f(m));
        }
        table.push(row);
    };
    push_row("mean_ape", &|m| format!("{:.4}", m.mean_ape));
    push_row("median_ape", &|m| format!("{:.4}", m.median_ape));
    push_row("sd_ape", &|m| format!("{:.4}", m.sd_ape));
    push_row("coverage", &|m| format!("{}/{}", m.covered, m.evaluated));

    let out = section.out.clone().unwrap_or_else(|| PathBuf::from("comparison.csv"));
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(&header)?;
    for row in &table {
        w.write_record(row)?;
    }
    w.flush()?;

    println!("{}", header.join(","));
    for row in &table {
        println!("{}", row.join(","));
    }
    eprintln!("evaluate: wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
