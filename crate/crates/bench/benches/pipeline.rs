use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridcascade_bench::{cascades, grid, model};
use gridcascade_core::autodiff::Tape;
use gridcascade_core::baselines::{bodf_pagerank, electric_betweenness, DEFAULT_DAMPING};
use gridcascade_core::cascade::simulate_cascade;
use gridcascade_core::exposure::{aggregate_exposure, ExposureOptions};
use gridcascade_core::grid::{build_line_graph, GridFamily};
use gridcascade_core::model::GraphIndex;
use gridcascade_core::powerflow::{compute_sensitivities, solve_dc};

fn power_flow(c: &mut Criterion) {
    let mut g = c.benchmark_group("power_flow");
    for n in [50, 100] {
        let grid = grid(GridFamily::RingMesh, n);
        let active = vec![true; grid.line_count()];
        g.bench_with_input(BenchmarkId::new("solve_dc", n), &grid, |b, grid| {
            b.iter(|| solve_dc(black_box(grid), &active).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ptdf_lodf", n), &grid, |b, grid| {
            b.iter(|| compute_sensitivities(black_box(grid), &active).unwrap())
        });
    }
    g.finish();
}

fn cascade(c: &mut Criterion) {
    let grid = grid(GridFamily::HubSpoke, 100);
    let initial: Vec<usize> = cascades(&grid, 1)[0].initial_failures();
    c.bench_function("simulate_cascade/hub-spoke-100", |b| {
        b.iter(|| simulate_cascade(black_box(&grid), &initial).unwrap())
    });
}

fn model_passes(c: &mut Criterion) {
    let grid = grid(GridFamily::RingMesh, 100);
    let lg = build_line_graph(&grid);
    let index = GraphIndex::new(&lg);
    let sample = cascades(&grid, 1).remove(0);
    let mut g = c.benchmark_group("model");
    for d in [32, 64] {
        let mut m = model(d);
        g.bench_function(BenchmarkId::new("forward", d), |b| b.iter(|| m.forward(black_box(&sample), &lg).unwrap()));
        g.bench_function(BenchmarkId::new("forward_backward", d), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let loss = m.loss_on(&mut tape, &sample, &index).unwrap();
                m.params_mut().zero_grad();
                tape.backward(loss, m.params_mut()).unwrap();
            })
        });
    }
    g.finish();
}

fn rankings(c: &mut Criterion) {
    let grid = grid(GridFamily::HubSpoke, 100);
    let lg = build_line_graph(&grid);
    let pool = cascades(&grid, 30);
    let m = model(32);
    let mut g = c.benchmark_group("ranking");
    g.sample_size(10);
    g.bench_function("exposure_30_samples", |b| {
        b.iter(|| aggregate_exposure(&m, black_box(&pool), &lg, ExposureOptions::default()).unwrap())
    });
    g.bench_function("electric_betweenness", |b| b.iter(|| electric_betweenness(black_box(&grid)).unwrap()));
    g.bench_function("bodf_pagerank", |b| b.iter(|| bodf_pagerank(black_box(&grid), DEFAULT_DAMPING).unwrap()));
    g.finish();
}

criterion_group!(benches, power_flow, cascade, model_passes, rankings);
criterion_main!(benches);
