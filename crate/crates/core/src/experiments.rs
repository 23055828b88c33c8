//! Reference experiments: the utility tables and the series behind the
//! impact, drift, filter and strategy figures.

use serde::{Deserialize, Serialize};

use crate::bsde_solver::{solve_backward, strategy_for_path, DriftSource};
use crate::config::ExperimentConfig;
use crate::error::{invalid, Result};
use crate::filtering::{FilterOutput, ParticleCloud, ParticleFilter};
use crate::market_model::{ImpactDistribution, ImpactDraw, ImpactFunction, MarketParams};
use crate::mc_evaluator::{estimate_mean, innovations_log_likelihood, log_likelihood, power_value_from_xi, Estimate};
use crate::path_engine::{SimulatedPath, Simulator, TimeGrid};
use crate::strategies::{evolve_wealth, log_fractions, InvestorKind, UtilitySpec, WealthScheme};

/// Per-path quantities behind both tables. Wealth-based entries are `None`
/// when the wealth recursion went bankrupt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub liquidated: bool,
    pub log_uninformed: Option<f64>,
    pub log_full: Option<f64>,
    pub log_partial: Option<f64>,
    pub power_uninformed: Option<f64>,
    pub ln_l_full: f64,
    pub ln_l_partial: Option<f64>,
    /// Log utility under the power Merton fraction.
    pub log_uninformed_power_fraction: Option<f64>,
    /// Informed log utilities under Euler wealth, for comparison.
    pub log_full_euler: Option<f64>,
    pub log_partial_euler: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableOptions {
    pub include_partial: bool,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self { include_partial: true }
    }
}

fn terminal_utility(
    path: &SimulatedPath,
    pi: &[f64],
    drift: &[f64],
    params: &MarketParams,
    grid: &TimeGrid,
    x0: f64,
    scheme: WealthScheme,
    utility: UtilitySpec,
) -> Option<f64> {
    evolve_wealth(path, pi, drift, params, grid, x0, scheme).ok().map(|w| utility.apply(w.terminal()))
}

/// Outcome of one path given its filter output (if the partial investor is
/// evaluated).
pub fn path_outcome(
    path: &SimulatedPath,
    filter: Option<&FilterOutput>,
    cfg: &ExperimentConfig,
    params: &MarketParams,
    grid: &TimeGrid,
) -> Result<PathOutcome> {
    let drift = path.market_drifts(grid, params.mu);
    let x0 = cfg.x0;
    let s2 = params.sigma * params.sigma;
    let power = UtilitySpec::Power { p: cfg.p };
    let eval = |pi: &[f64], scheme, u| terminal_utility(path, pi, &drift, params, grid, x0, scheme, u);

    let pi_log = vec![params.mu / s2; grid.steps + 1];
    let pi_pow = vec![params.mu / ((1.0 - cfg.p) * s2); grid.steps + 1];
    let pi_full = log_fractions(InvestorKind::FullyInformed, path, grid, params, None)?;

    let mut out = PathOutcome {
        liquidated: path.liquidated_before_horizon().is_some(),
        log_uninformed: eval(&pi_log, cfg.uninformed_wealth, UtilitySpec::Log),
        log_full: eval(&pi_full, cfg.informed_wealth, UtilitySpec::Log),
        log_partial: None,
        power_uninformed: eval(&pi_pow, cfg.uninformed_wealth, power),
        ln_l_full: log_likelihood(&path.dw, &drift, params, grid),
        ln_l_partial: None,
        log_uninformed_power_fraction: eval(&pi_pow, cfg.uninformed_wealth, UtilitySpec::Log),
        log_full_euler: eval(&pi_full, WealthScheme::Euler, UtilitySpec::Log),
        log_partial_euler: None,
    };
    if let Some(f) = filter {
        let pi_partial = log_fractions(InvestorKind::PartiallyInformed, path, grid, params, Some(f))?;
        out.log_partial = eval(&pi_partial, cfg.informed_wealth, UtilitySpec::Log);
        out.log_partial_euler = eval(&pi_partial, WealthScheme::Euler, UtilitySpec::Log);
        out.ln_l_partial = Some(innovations_log_likelihood(path, grid, params, &f.mu_bar));
    }
    Ok(out)
}

/// Stream `n` paths of `sim` and collect their outcomes without storing the
/// batch.
pub fn table_outcomes_with(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    n: usize,
    opts: TableOptions,
) -> Result<Vec<PathOutcome>> {
    if n == 0 {
        return Err(invalid("path count must be >= 1"));
    }
    let filter = if opts.include_partial {
        Some(ParticleFilter::for_grid(cfg.cloud(&sim.dist)?, &sim.grid, &sim.params)?)
    } else {
        None
    };
    sim.map(n, |_, path| {
        let f = filter.as_ref().map(|f| f.run(&path, &sim.grid, cfg.dwq_mode));
        path_outcome(&path, f.as_ref(), cfg, &sim.params, &sim.grid)
    })
    .into_iter()
    .collect()
}

pub fn table_outcomes(cfg: &ExperimentConfig, opts: TableOptions) -> Result<Vec<PathOutcome>> {
    cfg.validate()?;
    table_outcomes_with(cfg, &cfg.simulator()?, cfg.n_paths, opts)
}

/// Mean of the kept samples; the excluded count is the number of `None`s.
pub fn estimate_kept(samples: impl Iterator<Item = Option<f64>>) -> Result<Estimate> {
    let all: Vec<Option<f64>> = samples.collect();
    let kept: Vec<f64> = all.iter().flatten().copied().collect();
    let mut e = estimate_mean(&kept)?;
    e.n_excluded = all.len() - kept.len();
    Ok(e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub investor: InvestorKind,
    pub utility: String,
    pub estimate: Estimate,
    /// Likelihood moment behind a power value, when the row is computed that way.
    pub xi: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub seed: u64,
    pub n_paths: usize,
    #[serde(rename = "M")]
    pub steps: usize,
    pub scheme: String,
    pub rows: Vec<TableRow>,
}

impl TableReport {
    pub fn from_outcomes(cfg: &ExperimentConfig, outcomes: &[PathOutcome]) -> Result<Self> {
        let p = cfg.p;
        let expo = p / (p - 1.0);
        let power_row = |investor, ln_l: Vec<f64>| -> Result<TableRow> {
            let xi = estimate_mean(&ln_l.iter().map(|l| (expo * l).exp()).collect::<Vec<_>>())?;
            Ok(TableRow { investor, utility: "power".into(), estimate: power_value_from_xi(&xi, p, cfg.x0), xi: Some(xi) })
        };
        let log_row = |investor, est| TableRow { investor, utility: "log".into(), estimate: est, xi: None };
        let mut rows = Vec::with_capacity(6);
        rows.push(TableRow {
            investor: InvestorKind::Uninformed,
            utility: "power".into(),
            estimate: estimate_kept(outcomes.iter().map(|o| o.power_uninformed))?,
            xi: None,
        });
        let has_partial = outcomes.iter().all(|o| o.ln_l_partial.is_some());
        if has_partial {
            rows.push(power_row(
                InvestorKind::PartiallyInformed,
                outcomes.iter().map(|o| o.ln_l_partial.unwrap_or(f64::NAN)).collect(),
            )?);
        }
        rows.push(power_row(InvestorKind::FullyInformed, outcomes.iter().map(|o| o.ln_l_full).collect())?);
        rows.push(log_row(InvestorKind::Uninformed, estimate_kept(outcomes.iter().map(|o| o.log_uninformed))?));
        if has_partial {
            rows.push(log_row(InvestorKind::PartiallyInformed, estimate_kept(outcomes.iter().map(|o| o.log_partial))?));
        }
        rows.push(log_row(InvestorKind::FullyInformed, estimate_kept(outcomes.iter().map(|o| o.log_full))?));
        Ok(Self { seed: cfg.seed, n_paths: outcomes.len(), steps: cfg.steps, scheme: cfg.scheme.to_string(), rows })
    }

    pub fn get(&self, investor: InvestorKind, utility: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.investor == investor && r.utility == utility)
    }

    /// Plain-text rendering, one block per utility.
    pub fn to_text(&self) -> String {
        let mut s = format!("N = {}, M = {}, seed = {}, scheme = {}\n", self.n_paths, self.steps, self.seed, self.scheme);
        for utility in ["power", "log"] {
            s.push_str(&format!("\n{utility} utility\n"));
            s.push_str(&format!("{:<20} {:>12} {:>10} {:>26} {:>9}\n", "investor", "mean", "se", "95% ci", "excluded"));
            for r in self.rows.iter().filter(|r| r.utility == utility) {
                let e = &r.estimate;
                s.push_str(&format!(
                    "{:<20} {:>12.5} {:>10.5} {:>12.5} .. {:>10.5} {:>9}\n",
                    r.investor.label(),
                    e.mean,
                    e.se,
                    e.ci95.0,
                    e.ci95.1,
                    e.n_excluded
                ));
            }
        }
        s
    }
}

pub fn compute_tables(cfg: &ExperimentConfig) -> Result<TableReport> {
    TableReport::from_outcomes(cfg, &table_outcomes(cfg, TableOptions::default())?)
}

/// g(t) for each draw on `points + 1` equally spaced times in [0, horizon].
pub fn impact_curves(draws: &[ImpactDraw], horizon: f64, points: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if points == 0 || !(horizon > 0.0) {
        return Err(invalid("impact curve needs points >= 1 and a positive horizon"));
    }
    let t: Vec<f64> = (0..=points).map(|i| horizon * i as f64 / points as f64).collect();
    let curves = draws.iter().map(|d| t.iter().map(|&x| d.value(x)).collect()).collect();
    Ok((t, curves))
}

/// Simulator whose every path carries the configured realized draw.
pub fn scenario_simulator(cfg: &ExperimentConfig) -> Result<Simulator> {
    let dist = ImpactDistribution::point_mass(cfg.scenario_draw()?);
    cfg.simulator_with(cfg.grid()?, dist, cfg.rng().substream(3))
}

/// The first `count` scenario paths that liquidate strictly before the
/// horizon, with their path indices.
pub fn scenario_paths(cfg: &ExperimentConfig, count: usize) -> Result<Vec<(u64, SimulatedPath)>> {
    let sim = scenario_simulator(cfg)?;
    let mut out = Vec::with_capacity(count);
    let mut i = 0u64;
    let limit = 1000 * count.max(1) as u64;
    while out.len() < count {
        if i >= limit {
            return Err(invalid("scenario produced too few liquidating paths"));
        }
        let p = sim.path(i);
        if p.liquidated_before_horizon().is_some() {
            out.push((i, p));
        }
        i += 1;
    }
    Ok(out)
}

/// Filter run on one scenario path with post-liquidation error measures.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCase {
    pub index: u64,
    pub path: SimulatedPath,
    pub output: FilterOutput,
    pub rmse_filter: f64,
    /// Constant pre-liquidation drift as the estimate.
    pub rmse_constant: f64,
    /// Prior-averaged drift curve as the estimate.
    pub rmse_prior_curve: f64,
}

fn rmse(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        s += (x - y) * (x - y);
        n += 1;
    }
    (s / n as f64).sqrt()
}

/// Drift of the prior-weighted cloud at every offset since liquidation.
pub fn prior_drift_curve(cloud: &ParticleCloud, grid: &TimeGrid, params: &MarketParams, offsets: usize) -> Vec<f64> {
    let w = cloud.normalized_weights();
    (0..offsets)
        .map(|j| {
            let e = j as f64 * grid.dt;
            w.iter().zip(&cloud.particles).map(|(wi, d)| wi * d.impacted_drift(e, params.mu)).sum()
        })
        .collect()
}

pub fn filter_cases(cfg: &ExperimentConfig, count: usize, traced: bool) -> Result<Vec<FilterCase>> {
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let cloud = cfg.cloud(&cfg.impact_dist()?)?;
    let prior = prior_drift_curve(&cloud, &grid, &params, grid.steps + 1);
    let filter = ParticleFilter::for_grid(cloud, &grid, &params)?;
    scenario_paths(cfg, count)?
        .into_iter()
        .map(|(index, path)| {
            let output =
                if traced { filter.run_traced(&path, &grid, cfg.dwq_mode) } else { filter.run(&path, &grid, cfg.dwq_mode) };
            let tau = path.liquidated_before_horizon().expect("scenario paths liquidate");
            let truth: Vec<f64> = (tau..=grid.steps).map(|m| path.market_drift(m, &grid, params.mu)).collect();
            Ok(FilterCase {
                rmse_filter: rmse(truth.iter().copied(), output.mu_bar[tau..].iter().copied()),
                rmse_constant: rmse(truth.iter().copied(), std::iter::repeat(params.mu)),
                rmse_prior_curve: rmse(truth.iter().copied(), prior.iter().copied()),
                index,
                path,
                output,
            })
        })
        .collect()
}

/// Fractions of the three investors along one path (M values each).
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyTrace {
    pub uninformed: Vec<f64>,
    pub partial: Vec<f64>,
    pub full: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyScenario {
    pub index: u64,
    pub path: SimulatedPath,
    pub filter: FilterOutput,
    pub log: StrategyTrace,
    pub power: StrategyTrace,
}

/// Latest liquidation time (as a fraction of the horizon) accepted for the
/// strategy scenario, leaving room to see the reversion.
const SCENARIO_LATEST_TAU: f64 = 0.6;

/// Log and power strategies on the first scenario path that liquidates early
/// enough. Power strategies come from BSDE solves on `bsde_paths` prior paths.
pub fn strategy_scenario(cfg: &ExperimentConfig) -> Result<StrategyScenario> {
    cfg.validate()?;
    let params = cfg.market()?;
    let grid = cfg.grid()?;
    let dist = cfg.impact_dist()?;
    let cloud = cfg.cloud(&dist)?;
    let filter = ParticleFilter::for_grid(cloud, &grid, &params)?;

    let sim = scenario_simulator(cfg)?;
    let latest = (SCENARIO_LATEST_TAU * grid.steps as f64) as usize;
    let (index, path) = (0..1_000_000u64)
        .map(|i| (i, sim.path(i)))
        .find(|(_, p)| matches!(p.liquidated_before_horizon(), Some(t) if t <= latest))
        .ok_or_else(|| invalid("no scenario path liquidates early enough"))?;
    let fout = filter.run(&path, &grid, cfg.dwq_mode);

    let trim = |v: Vec<f64>| v[..grid.steps].to_vec();
    let log = StrategyTrace {
        uninformed: trim(log_fractions(InvestorKind::Uninformed, &path, &grid, &params, None)?),
        partial: trim(log_fractions(InvestorKind::PartiallyInformed, &path, &grid, &params, Some(&fout))?),
        full: trim(log_fractions(InvestorKind::FullyInformed, &path, &grid, &params, None)?),
    };

    let batch_sim = cfg.simulator_with(grid, dist, cfg.rng().substream(4))?;
    let batch = batch_sim.batch(cfg.bsde_paths)?;
    let full_cfg = cfg.bsde(DriftSource::FullyInformed)?;
    let full_sol = solve_backward(&batch, &grid, &params, &full_cfg, None)?;
    let batch_filters = filter.run_batch(&batch, &grid, cfg.dwq_mode);
    let part_cfg = cfg.bsde(DriftSource::Filtered)?;
    let part_sol = solve_backward(&batch, &grid, &params, &part_cfg, Some(&batch_filters))?;
    let power = StrategyTrace {
        uninformed: vec![params.mu / ((1.0 - cfg.p) * params.sigma * params.sigma); grid.steps],
        partial: strategy_for_path(&part_sol, &path, Some(&fout), &grid, &params, &part_cfg)?,
        full: strategy_for_path(&full_sol, &path, None, &grid, &params, &full_cfg)?,
    };
    Ok(StrategyScenario { index, path, filter: fout, log, power })
}
