//! End-to-end runs of the public API at reduced sizes.

use liqsim::bsde_solver::{path_strategy, solve_backward, write_diagnostics, DriftSource};
use liqsim::closed_form::{merton_log_value, v_log_fully_averaged, v_log_uninformed};
use liqsim::experiments::{compute_tables, filter_cases, strategy_scenario, TableOptions, TableReport};
use liqsim::filtering::{write_filter_trace, ParticleFilter};
use liqsim::path_engine::{simulate_batch, write_paths_csv};
use liqsim::strategies::write_strategy_trace;
use liqsim::{Error, ExperimentConfig, InvestorKind, RngSpec, Scheme};

fn reduced() -> ExperimentConfig {
    ExperimentConfig { n_paths: 4000, steps: 100, bsde_paths: 2000, filter_per_axis: 10, ..Default::default() }
}

#[test]
fn tables_are_ordered_and_reproducible() {
    let cfg = reduced();
    let t = compute_tables(&cfg).unwrap();
    for u in ["log", "power"] {
        let v = |k| t.get(k, u).unwrap().estimate.mean;
        assert!(v(InvestorKind::Uninformed) < v(InvestorKind::PartiallyInformed), "{u}");
        assert!(v(InvestorKind::PartiallyInformed) < v(InvestorKind::FullyInformed), "{u}");
    }
    assert_eq!(t, compute_tables(&cfg).unwrap());
    let text = t.to_text();
    assert!(text.contains("power utility") && text.contains("log utility"));
    let back: TableReport = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    assert_eq!(back, t);
}

#[test]
fn changing_the_seed_changes_the_estimates() {
    let a = compute_tables(&reduced()).unwrap();
    let b = compute_tables(&ExperimentConfig { seed: 7, ..reduced() }).unwrap();
    assert_ne!(a.rows[0].estimate.mean, b.rows[0].estimate.mean);
}

#[test]
fn monte_carlo_tracks_closed_form() {
    let cfg = ExperimentConfig { n_paths: 20_000, ..reduced() };
    let out = liqsim::experiments::table_outcomes(&cfg, TableOptions { include_partial: false }).unwrap();
    let t = TableReport::from_outcomes(&cfg, &out).unwrap();
    let params = cfg.market().unwrap();
    let dist = cfg.impact_dist().unwrap();
    let spec = cfg.quad_spec();
    let un = v_log_uninformed(&params, &dist, cfg.x0, &spec).unwrap().value;
    let full = v_log_fully_averaged(&params, &dist, cfg.x0, &spec).unwrap().value;
    let mc_un = t.get(InvestorKind::Uninformed, "log").unwrap().estimate;
    let mc_full = t.get(InvestorKind::FullyInformed, "log").unwrap().estimate;
    assert!((mc_un.mean - un).abs() < 4.0 * mc_un.se + 0.01, "{} vs {un}", mc_un.mean);
    assert!((mc_full.mean - full).abs() < 4.0 * mc_full.se + 0.02, "{} vs {full}", mc_full.mean);
    assert!(un < merton_log_value(&params, cfg.x0) && merton_log_value(&params, cfg.x0) < full);
}

#[test]
fn csv_artifacts_have_their_schemas() {
    let cfg = reduced();
    let grid = cfg.grid().unwrap();
    let params = cfg.market().unwrap();
    let batch = simulate_batch(grid, params, cfg.impact_dist().unwrap(), 3, RngSpec::new(1, 0), Scheme::Euler).unwrap();
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, &batch, &grid).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * (grid.steps + 1));
    assert!(text.starts_with("path_id,step,t,s_fund,s_market,run_min,tau_flag\n"));

    let case = filter_cases(&cfg, 1, false).unwrap().remove(0);
    let mut buf = Vec::new();
    write_filter_trace(&mut buf, &case.path, &grid, &params, &case.output).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), grid.steps + 2);

    let s = strategy_scenario(&cfg).unwrap();
    let mut buf = Vec::new();
    write_strategy_trace(&mut buf, &grid, &s.path.s_market, &s.power.uninformed, &s.power.partial, &s.power.full).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), grid.steps + 1);
    assert!(text.starts_with("step,t,s_market,pi_uninformed,pi_partial,pi_full\n"));
}

#[test]
fn bsde_pipeline_with_filtered_drift() {
    let cfg = reduced();
    let grid = cfg.grid().unwrap();
    let params = cfg.market().unwrap();
    let dist = cfg.impact_dist().unwrap();
    let batch = cfg.simulator_with(grid, dist.clone(), cfg.rng()).unwrap().batch(cfg.bsde_paths).unwrap();
    let filter = ParticleFilter::for_grid(cfg.cloud(&dist).unwrap(), &grid, &params).unwrap();
    let outs = filter.run_batch(&batch, &grid, cfg.dwq_mode);
    let bcfg = cfg.bsde(DriftSource::Filtered).unwrap();
    let sol = solve_backward(&batch, &grid, &params, &bcfg, Some(&outs)).unwrap();
    assert!(sol.h.iter().all(|h| h.is_finite()));
    assert!(sol.h_column(0).iter().all(|&h| h > 0.0));

    // Fitted values may dip below zero on outlying paths; those surface as
    // a per-path error instead of a fraction.
    let mut rejected = 0;
    for (i, path) in batch.iter().enumerate() {
        match path_strategy(&sol, i, path, &grid, &params, &bcfg, Some(&outs)) {
            Ok(v) => assert!(v.len() == grid.steps && v.iter().all(|x| x.is_finite())),
            Err(Error::NonPositiveH { path, step, value }) => {
                assert_eq!(path, i);
                assert!(value <= 0.0 && sol.h(i, step) == value);
                rejected += 1;
            }
            Err(e) => panic!("path {i}: {e}"),
        }
    }
    eprintln!("rejected {rejected} of {}", batch.len());
    assert!(rejected * 100 < batch.len(), "{rejected}");

    let mut buf = Vec::new();
    write_diagnostics(&mut buf, &sol.diagnostics, 6).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), grid.steps + 1);
}
