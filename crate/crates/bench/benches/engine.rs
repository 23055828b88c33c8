use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use liqsim::bsde_solver::{regress, Ridge};
use liqsim::closed_form::{v_log_fully_averaged, v_log_uninformed};
use liqsim::experiments::scenario_paths;
use liqsim::filtering::{DwqMode, ParticleCloud, ParticleFilter};
use liqsim::market_model::ImpactDistribution;
use liqsim::{ExperimentConfig, MarketParams, RngSpec, Scheme, Simulator, TimeGrid};

fn simulate(c: &mut Criterion) {
    let grid = TimeGrid::new(1.0, 250).unwrap();
    let sim = Simulator::new(grid, MarketParams::default(), ImpactDistribution::default(), RngSpec::new(1, 0), Scheme::Euler)
        .unwrap();
    c.bench_function("simulate 1000 paths, 250 steps", |b| b.iter(|| black_box(sim.batch(1000).unwrap())));
}

fn filter(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let grid = cfg.grid().unwrap();
    let params = cfg.market().unwrap();
    let (_, path) = scenario_paths(&cfg, 1).unwrap().remove(0);
    let dist = ImpactDistribution::default();
    let f = ParticleFilter::for_grid(ParticleCloud::grid(&dist, 20).unwrap(), &grid, &params).unwrap();
    c.bench_function("filter one liquidating path, 400 atoms", |b| {
        b.iter(|| black_box(f.run(&path, &grid, DwqMode::Observed)))
    });
}

fn regression(c: &mut Criterion) {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (n, k) = (20_000, 6);
    let mut f = Vec::with_capacity(n * k);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = r.random_range(72.0..100.0);
        let m: f64 = r.random_range(72.0..x);
        f.extend_from_slice(&[1.0, x, m, x * x, m * m, x * m]);
        y.push(1.0 + 0.01 * x - 0.02 * m + r.random_range(-0.1..0.1));
    }
    c.bench_function("ridge regression 20000 x 6", |b| {
        b.iter(|| black_box(regress(&y, &f, k, Ridge::Auto).unwrap()))
    });
}

fn closed_form(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let params = cfg.market().unwrap();
    let dist = cfg.impact_dist().unwrap();
    let spec = cfg.quad_spec();
    c.bench_function("closed form, uninformed log", |b| {
        b.iter(|| black_box(v_log_uninformed(&params, &dist, cfg.x0, &spec).unwrap()))
    });
    c.bench_function("closed form, fully informed log", |b| {
        b.iter(|| black_box(v_log_fully_averaged(&params, &dist, cfg.x0, &spec).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = simulate, filter, regression, closed_form
}
criterion_main!(benches);
