//! Subcommand bodies. Each writes its artifacts through [`Output`].

use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use liqsim::bsde_solver::{solve_backward, write_diagnostics, DriftSource, RegressionBasis};
use liqsim::closed_form::{
    merton_log_value, merton_power_value, prob_no_liquidation, v_log_fully_averaged, v_log_partial, v_log_uninformed,
    v_power_uninformed, ClosedFormRecord,
};
use liqsim::experiments::{compute_tables, filter_cases, impact_curves, scenario_paths, strategy_scenario, StrategyTrace};
use liqsim::filtering::{write_filter_trace, ParticleFilter};
use liqsim::market_model::{ImpactDraw, ImpactDraw4, ImpactFunction};
use liqsim::mc_evaluator::EvaluationRecord;
use liqsim::path_engine::{write_path_rows, PATHS_CSV_HEADER};
use liqsim::strategies::write_strategy_trace;
use liqsim::{ExperimentConfig, SimulatedPath};

use crate::error::CliError;
use crate::manifest::Output;
use crate::svg::{line_chart, Series};

/// Paths generated in parallel per block of the path dump.
const SIMULATE_BLOCK: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    Impact,
    Drift,
    Filter,
    Strategy,
    All,
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn csv_bytes<F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>>(f: F) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let sim = cfg.simulator()?;
    let n = cfg.n_paths as u64;
    out.stream("paths.csv", |w| {
        writeln!(w, "{PATHS_CSV_HEADER}")?;
        let mut start = 0;
        while start < n {
            let end = (start + SIMULATE_BLOCK).min(n);
            let block: Vec<SimulatedPath> = (start..end).into_par_iter().map(|i| sim.path(i)).collect();
            write_path_rows(&mut *w, start, &block, &sim.grid)?;
            start = end;
        }
        Ok(())
    })
}

pub fn tables(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let report = compute_tables(cfg)?;
    let records: Vec<EvaluationRecord> = report
        .rows
        .iter()
        .map(|r| EvaluationRecord::new(r.investor.label(), &r.utility, &r.estimate, cfg.seed, &cfg.scheme.to_string(), cfg.steps))
        .collect();
    #[derive(Serialize)]
    struct Doc<'a> {
        records: &'a [EvaluationRecord],
        report: &'a liqsim::experiments::TableReport,
    }
    out.write("tables.json", &json(&Doc { records: &records, report: &report }))?;
    out.write("tables.txt", report.to_text().as_bytes())
}

pub fn closed_form(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let params = cfg.market()?;
    let dist = cfg.impact_dist()?;
    let spec = cfg.quad_spec();
    let x0 = cfg.x0;
    let values = vec![
        ClosedFormRecord::new("uninformed", "log", &v_log_uninformed(&params, &dist, x0, &spec)?),
        ClosedFormRecord::new("partially-informed", "log", &v_log_partial(&params, &dist, x0, &cfg.partial_budget(), &spec)?),
        ClosedFormRecord::new("fully-informed", "log", &v_log_fully_averaged(&params, &dist, x0, &spec)?),
        ClosedFormRecord::new("uninformed", "power", &v_power_uninformed(&params, &dist, x0, cfg.p, &spec)?),
    ];
    #[derive(Serialize)]
    struct Doc {
        prob_no_liquidation: f64,
        merton_log: f64,
        merton_power: f64,
        values: Vec<ClosedFormRecord>,
    }
    let doc = Doc {
        prob_no_liquidation: prob_no_liquidation(&params),
        merton_log: merton_log_value(&params, x0),
        merton_power: merton_power_value(&params, x0, cfg.p),
        values,
    };
    out.write("closed_form.json", &json(&doc))
}

pub fn figures(cfg: &ExperimentConfig, which: Figure, out: &mut Output) -> Result<(), CliError> {
    let all = which == Figure::All;
    if all || which == Figure::Impact {
        impact_figure(cfg, out)?;
    }
    if all || which == Figure::Drift {
        drift_figure(cfg, out)?;
    }
    if all || which == Figure::Filter {
        filter_figure(cfg, out)?;
    }
    if all || which == Figure::Strategy {
        strategy_figure(cfg, out)?;
    }
    Ok(())
}

fn impact_figure(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let draws = [ImpactDraw::new(0.05, 0.1)?, ImpactDraw::new(0.1, 0.1)?];
    let (t, curves) = impact_curves(&draws, cfg.horizon, 1000)?;
    let csv = csv_bytes(|w| {
        writeln!(w, "t,g_theta0.05_k0.1,g_theta0.1_k0.1")?;
        for (i, ti) in t.iter().enumerate() {
            writeln!(w, "{ti},{},{}", curves[0][i], curves[1][i])?;
        }
        Ok(())
    });
    out.write("impact.csv", &csv)?;
    let svg = line_chart(
        "Impact function",
        "time since liquidation",
        "g",
        &[
            Series { name: "theta 0.05, k 0.1", x: &t, y: &curves[0] },
            Series { name: "theta 0.1, k 0.1", x: &t, y: &curves[1] },
        ],
    );
    out.write("impact.svg", svg.as_bytes())?;

    let four = ImpactDraw4::new(0.05, 0.1, 0.02, 0.08)?;
    let g4: Vec<f64> = t.iter().map(|&x| four.value(x)).collect();
    let csv = csv_bytes(|w| {
        writeln!(w, "t,g")?;
        for (ti, g) in t.iter().zip(&g4) {
            writeln!(w, "{ti},{g}")?;
        }
        Ok(())
    });
    out.write("impact4.csv", &csv)?;
    let svg = line_chart(
        "Four-parameter impact function",
        "time since liquidation",
        "g",
        &[Series { name: "0.05, 0.1, 0.02, 0.08", x: &t, y: &g4 }],
    );
    out.write("impact4.svg", svg.as_bytes())
}

fn drift_figure(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let (_, path) = scenario_paths(cfg, 1)?.remove(0);
    let t: Vec<f64> = (0..=grid.steps).map(|m| grid.time(m)).collect();
    let drift = path.market_drifts(&grid, params.mu);
    let csv = csv_bytes(|w| {
        writeln!(w, "step,t,s_fund,s_market,mu_market")?;
        for m in 0..=grid.steps {
            writeln!(w, "{m},{},{},{},{}", t[m], path.s_fund[m], path.s_market[m], drift[m])?;
        }
        Ok(())
    });
    out.write("drift.csv", &csv)?;
    let svg = line_chart("Drift of the market price", "t", "drift", &[Series { name: "market drift", x: &t, y: &drift }]);
    out.write("drift.svg", svg.as_bytes())?;
    let svg = line_chart(
        "Fundamental value and market price",
        "t",
        "price",
        &[Series { name: "fundamental", x: &t, y: &path.s_fund }, Series { name: "market", x: &t, y: &path.s_market }],
    );
    out.write("price.svg", svg.as_bytes())
}

fn filter_figure(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let case = filter_cases(cfg, 1, false)?.remove(0);
    let csv = csv_bytes(|w| write_filter_trace(w, &case.path, &grid, &params, &case.output));
    out.write("filter_trace.csv", &csv)?;
    let t: Vec<f64> = (0..=grid.steps).map(|m| grid.time(m)).collect();
    let realized = case.path.market_drifts(&grid, params.mu);
    let svg = line_chart(
        "Filtered and realized drift",
        "t",
        "drift",
        &[Series { name: "realized", x: &t, y: &realized }, Series { name: "filtered", x: &t, y: &case.output.mu_bar }],
    );
    out.write("filter_trace.svg", svg.as_bytes())
}

fn trace_files(
    cfg: &ExperimentConfig,
    out: &mut Output,
    name: &str,
    title: &str,
    s_market: &[f64],
    trace: &StrategyTrace,
) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let csv = csv_bytes(|w| write_strategy_trace(w, &grid, s_market, &trace.uninformed, &trace.partial, &trace.full));
    out.write(&format!("{name}.csv"), &csv)?;
    let t: Vec<f64> = (0..grid.steps).map(|m| grid.time(m)).collect();
    let svg = line_chart(
        title,
        "t",
        "fraction of wealth in the asset",
        &[
            Series { name: "uninformed", x: &t, y: &trace.uninformed },
            Series { name: "partially informed", x: &t, y: &trace.partial },
            Series { name: "fully informed", x: &t, y: &trace.full },
        ],
    );
    out.write(&format!("{name}.svg"), svg.as_bytes())
}

fn strategy_figure(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let s = strategy_scenario(cfg)?;
    trace_files(cfg, out, "strategy_log", "Log-utility strategies", &s.path.s_market, &s.log)?;
    trace_files(cfg, out, "strategy_power", "Power-utility strategies", &s.path.s_market, &s.power)
}

pub fn filter_demo(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let cases = filter_cases(cfg, cfg.scenario_paths, true)?;
    let csv = csv_bytes(|w| {
        writeln!(w, "path_index,tau,rmse_filter,rmse_constant,rmse_prior_curve")?;
        for c in &cases {
            let tau = c.path.tau_time(&grid).unwrap_or(f64::NAN);
            writeln!(w, "{},{tau},{},{},{}", c.index, c.rmse_filter, c.rmse_constant, c.rmse_prior_curve)?;
        }
        Ok(())
    });
    out.write("filter_summary.csv", &csv)?;

    let first = &cases[0];
    out.write("filter_trace.csv", &csv_bytes(|w| write_filter_trace(w, &first.path, &grid, &params, &first.output)))?;
    let filter = ParticleFilter::for_grid(cfg.cloud(&cfg.impact_dist()?)?, &grid, &params)?;
    let tau = first.path.liquidated_before_horizon().expect("scenario paths liquidate");
    let snaps = first.output.snapshots.as_deref().unwrap_or(&[]);
    let csv = csv_bytes(|w| {
        writeln!(w, "step,t,theta_mean,k_mean")?;
        for (j, weights) in snaps.iter().enumerate() {
            let d = filter.posterior_mean(weights);
            writeln!(w, "{},{},{},{}", tau + j, grid.time(tau + j), d.theta, d.k)?;
        }
        Ok(())
    });
    out.write("filter_posterior.csv", &csv)
}

pub fn bsde_demo(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let dist = cfg.impact_dist()?;
    let sim = cfg.simulator_with(grid, dist.clone(), cfg.rng().substream(4))?;
    let batch = sim.batch(cfg.bsde_paths)?;
    let full_cfg = cfg.bsde(DriftSource::FullyInformed)?;
    let k = RegressionBasis { kind: full_cfg.basis, barrier: params.barrier() }.count();
    let full = solve_backward(&batch, &grid, &params, &full_cfg, None)?;
    out.write("bsde_diagnostics_full.csv", &csv_bytes(|w| write_diagnostics(w, &full.diagnostics, k)))?;

    let filter = ParticleFilter::for_grid(cfg.cloud(&dist)?, &grid, &params)?;
    let outputs = filter.run_batch(&batch, &grid, cfg.dwq_mode);
    let part_cfg = cfg.bsde(DriftSource::Filtered)?;
    let part = solve_backward(&batch, &grid, &params, &part_cfg, Some(&outputs))?;
    out.write("bsde_diagnostics_partial.csv", &csv_bytes(|w| write_diagnostics(w, &part.diagnostics, k)))?;

    #[derive(Serialize)]
    struct Summary {
        n_paths: usize,
        steps: usize,
        p: f64,
        h0_fully_informed: f64,
        h0_partially_informed: f64,
        bsde: liqsim::bsde_solver::BsdeConfig,
    }
    let summary = Summary {
        n_paths: batch.len(),
        steps: grid.steps,
        p: cfg.p,
        h0_fully_informed: full.h0(),
        h0_partially_informed: part.h0(),
        bsde: full_cfg,
    };
    out.write("bsde_summary.json", &json(&summary))
}
