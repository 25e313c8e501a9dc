//! Throughput of the data-parallel kernels, comparing a single-threaded
//! worker pool against all cores. Built with `--no-default-features` the
//! library runs its sequential fallback and both variants measure the same
//! code path, which is the point of the comparison.

use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ibnrcox::data::{Granularity, ObservedDataset};
use ibnrcox::em::{self, mm, FitOptions, ModelFamily, ModelParams, ModelParamsMm};
use ibnrcox::hmm::HmmParams;
use ibnrcox::ibnr::simulate_ibnr;
use ibnrcox::synth::{generate, DelayTruth, ExposurePattern, ScenarioConfig};

struct Fixture {
    dataset: ObservedDataset,
    options: FitOptions,
    params: ModelParamsMm,
    fitted: ModelParams,
}

fn fixture() -> Fixture {
    let config = ScenarioConfig {
        m: 400,
        t_len: 36,
        d_max: 3,
        granularity: Granularity::Monthly,
        start_date: NaiveDate::from_ymd_opt(2013, 1, 1).unwrap(),
        hmm: HmmParams {
            pi1: vec![0.6, 0.4],
            gamma: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        },
        theta: vec![vec![-1.9, 0.2, 0.4, 0.1], vec![-0.7, 0.2, 0.4, 0.1]],
        covariates: true,
        delay: DelayTruth::Multinomial { p: vec![0.7, 0.18, 0.08, 0.04] },
        exposure: ExposurePattern::Full,
        seed: 7,
    };
    let (dataset, _) = generate(&config).unwrap();
    let options = FitOptions { g: 2, seed: 3, max_iterations: 30, ..Default::default() };
    let fit = em::fit(&dataset, ModelFamily::Mm, &options).unwrap();
    let ModelParams::Mm(params) = fit.params.clone() else { unreachable!() };
    Fixture { dataset, options, params, fitted: fit.params }
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4);
    let mut sizes = vec![1usize];
    if cores > 1 {
        sizes.push(cores);
    }
    sizes
        .into_iter()
        .map(|n| {
            (
                format!("{n}-thread"),
                rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap(),
            )
        })
        .collect()
}

fn bench_emissions(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("emission_matrix");
    for (label, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &fx, |b, fx| {
            pool.install(|| {
                b.iter(|| mm::build_emissions(&fx.dataset, &fx.params, &fx.options).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_estep(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("mm_estep");
    for (label, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &fx, |b, fx| {
            pool.install(|| {
                b.iter(|| {
                    mm::estep_expectations_mm(&fx.dataset, &fx.params, &fx.options).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_simulation(c: &mut Criterion) {
    let fx = fixture();
    let mut group = c.benchmark_group("ibnr_simulation_1000_draws");
    group.sample_size(20);
    for (label, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &fx, |b, fx| {
            pool.install(|| {
                b.iter(|| {
                    simulate_ibnr(&fx.dataset, &fx.fitted, &fx.options, 1000, 11).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_emissions, bench_estep, bench_simulation);
criterion_main!(benches);
