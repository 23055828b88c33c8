//! Property tests for the model invariants.

use proptest::prelude::*;

use liqsim::bsde_solver::{regress, Ridge};
use liqsim::closed_form::{survival_at, tau_density};
use liqsim::config::{CloudKind, UtilityKind};
use liqsim::filtering::{normalize_log_weights, DwqMode, ParticleCloud, ParticleFilter};
use liqsim::market_model::{drift_market, impact_g, impact_g_prime, ImpactDistribution, ImpactDraw, ImpactFunction};
use liqsim::mc_evaluator::estimate_mean;
use liqsim::path_engine::{bridge_crossing_probability, detect_liquidation, RngSpec, Scheme};
use liqsim::strategies::{evolve_wealth, log_fractions, log_optimal_wealth_oracle, WealthScheme};
use liqsim::{ExperimentConfig, InvestorKind, MarketParams, Simulator, TimeGrid};

fn draw() -> impl Strategy<Value = ImpactDraw> {
    (0.01f64..0.5, 0.0f64..0.95).prop_map(|(t, k)| ImpactDraw::new(t, k).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn impact_stays_between_trough_and_one(d in draw(), t in 0.0f64..5.0) {
        let g = impact_g(t, &d).unwrap();
        prop_assert!(g <= 1.0 + 1e-15);
        prop_assert!(g >= 1.0 - d.k - 1e-15);
        prop_assert!((impact_g(d.theta, &d).unwrap() - (1.0 - d.k)).abs() < 1e-14);
        prop_assert_eq!(impact_g(0.0, &d).unwrap(), 1.0);
    }

    #[test]
    fn impact_derivative_matches_finite_difference(d in draw(), t in 0.001f64..3.0) {
        let h = 1e-6 * d.theta;
        let fd = (d.value(t + h) - d.value(t - h)) / (2.0 * h);
        let an = impact_g_prime(t, &d).unwrap();
        prop_assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{} vs {}", fd, an);
        prop_assert!((d.log_value(t) - d.value(t).ln()).abs() < 1e-12);
    }

    #[test]
    fn market_drift_is_mu_before_liquidation(d in draw(), tau in 0.0f64..1.0, t in 0.0f64..1.0) {
        let p = MarketParams::default();
        let v = drift_market(t, Some(tau), &d, &p).unwrap();
        if t < tau {
            prop_assert_eq!(v, p.mu);
        } else {
            let expect = d.derivative(t - tau) / d.value(t - tau) + p.mu;
            prop_assert!((v - expect).abs() < 1e-12);
        }
        prop_assert_eq!(drift_market(t, None, &d, &p).unwrap(), p.mu);
    }

    #[test]
    fn normalized_weights_sum_to_one(lw in prop::collection::vec(-800.0f64..800.0, 1..200)) {
        let w = normalize_log_weights(&lw);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn filter_weights_stay_normalized(seed in 0u64..1000) {
        let p = MarketParams::default();
        let grid = TimeGrid::new(1.0, 60).unwrap();
        let dist = ImpactDistribution::default();
        let sim = Simulator::new(grid, p, dist.clone(), RngSpec::new(seed, 0), Scheme::Euler).unwrap();
        let path = sim.path(0);
        let f = ParticleFilter::for_grid(ParticleCloud::grid(&dist, 5).unwrap(), &grid, &p).unwrap();
        let out = f.run_traced(&path, &grid, DwqMode::Observed);
        for w in out.snapshots.unwrap() {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(out.mu_bar.len(), grid.steps + 1);
    }

    #[test]
    fn survival_is_a_decreasing_probability(t1 in 0.01f64..2.0, dt in 0.0f64..2.0) {
        let p = MarketParams::default();
        let (a, b) = (survival_at(t1, &p), survival_at(t1 + dt, &p));
        prop_assert!((0.0..=1.0).contains(&a) && b <= a + 1e-15);
        prop_assert!(tau_density(t1, &p).unwrap() >= 0.0);
    }

    #[test]
    fn bridge_probability_is_a_probability(a in 72.01f64..120.0, b in 72.01f64..120.0, dt in 1e-4f64..0.1) {
        let q = bridge_crossing_probability(a, b, 72.0, 0.2, dt);
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert_eq!(bridge_crossing_probability(71.0, b, 72.0, 0.2, dt), 1.0);
    }

    #[test]
    fn paths_respect_their_invariants(seed in 0u64..10_000, exact in any::<bool>()) {
        let p = MarketParams::default();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let scheme = if exact { Scheme::ExactLog } else { Scheme::Euler };
        let sim = Simulator::new(grid, p, ImpactDistribution::default(), RngSpec::new(seed, 3), scheme).unwrap();
        let path = sim.path(seed);
        prop_assert_eq!(path.tau_index, detect_liquidation(&path.s_fund, p.barrier()));
        let tau = path.tau_index.unwrap_or(grid.steps + 1);
        prop_assert_eq!(&path.s_market[..tau.min(grid.steps + 1)], &path.s_fund[..tau.min(grid.steps + 1)]);
        prop_assert!(path.run_min.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(path.s_market.iter().all(|&s| s > 0.0));
        prop_assert_eq!(sim.path(seed), path);
    }

    #[test]
    fn exact_wealth_equals_log_optimal_oracle(seed in 0u64..10_000) {
        let p = MarketParams::default();
        let grid = TimeGrid::new(1.0, 80).unwrap();
        let sim = Simulator::new(grid, p, ImpactDistribution::default(), RngSpec::new(seed, 1), Scheme::Euler).unwrap();
        let path = sim.path(0);
        let pi = log_fractions(InvestorKind::FullyInformed, &path, &grid, &p, None).unwrap();
        let w = evolve_wealth(&path, &pi, &path.market_drifts(&grid, p.mu), &p, &grid, 80.0, WealthScheme::ExactExp).unwrap();
        let oracle = log_optimal_wealth_oracle(&path, &grid, &p, 80.0);
        prop_assert!((w.terminal() / oracle - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_is_shift_equivariant(xs in prop::collection::vec(-1e3f64..1e3, 2..300), c in -1e3f64..1e3) {
        let a = estimate_mean(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = estimate_mean(&shifted).unwrap();
        prop_assert!((b.mean - a.mean - c).abs() < 1e-9);
        prop_assert!((b.se - a.se).abs() < 1e-9 * (1.0 + a.se));
        prop_assert!(a.se >= 0.0 && a.ci95.0 <= a.mean && a.mean <= a.ci95.1);
    }

    #[test]
    fn regression_recovers_exact_linear_models(coef in prop::collection::vec(-5.0f64..5.0, 4), seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let mut f = Vec::with_capacity(n * 4);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row = [1.0, r.random_range(-3.0..3.0), r.random_range(0.0..10.0), r.random_range(-1.0..1.0)];
            y.push(row.iter().zip(&coef).map(|(a, b)| a * b).sum());
            f.extend_from_slice(&row);
        }
        let got = regress(&y, &f, 4, Ridge::Fixed(0.0)).unwrap();
        for (g, c) in got.iter().zip(&coef) {
            prop_assert!((g - c).abs() < 1e-8, "{:?} vs {:?}", got, coef);
        }
    }

    #[test]
    fn config_round_trips(
        mu in -0.2f64..0.3,
        sigma in 0.05f64..0.6,
        alpha in 0.1f64..0.99,
        steps in 1usize..5000,
        n in 1usize..1_000_000,
        seed in any::<u64>(),
        ridge in prop::option::of(0.0f64..1.0),
        power in any::<bool>(),
        random_cloud in any::<bool>(),
    ) {
        let cfg = ExperimentConfig {
            mu,
            sigma,
            alpha,
            steps,
            n_paths: n,
            seed,
            bsde_ridge: ridge,
            utility: if power { UtilityKind::Power } else { UtilityKind::Log },
            filter_cloud: if random_cloud { CloudKind::Random } else { CloudKind::Grid },
            ..Default::default()
        };
        prop_assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
