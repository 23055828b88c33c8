//! Closed-form strategy rules and wealth evolution.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::filtering::FilterOutput;
use crate::market_model::{drift_impacted, ImpactDraw, MarketParams};
use crate::mc_evaluator::log_likelihood;
use crate::path_engine::{SimulatedPath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvestorKind {
    Uninformed,
    PartiallyInformed,
    FullyInformed,
}

impl InvestorKind {
    pub const ALL: [InvestorKind; 3] =
        [InvestorKind::Uninformed, InvestorKind::PartiallyInformed, InvestorKind::FullyInformed];

    pub fn label(&self) -> &'static str {
        match self {
            InvestorKind::Uninformed => "uninformed",
            InvestorKind::PartiallyInformed => "partially-informed",
            InvestorKind::FullyInformed => "fully-informed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UtilitySpec {
    Log,
    Power { p: f64 },
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UtilitySpec::Power { p } if !(p > 0.0 && p < 1.0) => {
                Err(invalid(format!("power exponent must lie in (0,1), got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            UtilitySpec::Log => x.ln(),
            UtilitySpec::Power { p } => x.powf(p) / p,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            UtilitySpec::Log => "log",
            UtilitySpec::Power { .. } => "power",
        }
    }
}

/// What an investor knows about the post-liquidation drift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftInfo {
    None,
    Draw(ImpactDraw),
    Filtered(f64),
}

/// Log-utility fraction at time `t`.
pub fn strategy_log(kind: InvestorKind, t: f64, tau: Option<f64>, info: DriftInfo, params: &MarketParams) -> Result<f64> {
    let s2 = params.sigma * params.sigma;
    let after = matches!(tau, Some(u) if u < params.horizon && t >= u);
    match kind {
        InvestorKind::Uninformed => Ok(params.mu / s2),
        InvestorKind::FullyInformed => match info {
            DriftInfo::Draw(d) if after => Ok(drift_impacted(t, tau.unwrap(), &d, params)? / s2),
            DriftInfo::Draw(_) => Ok(params.mu / s2),
            _ => Err(invalid("fully informed strategy needs the realized draw")),
        },
        InvestorKind::PartiallyInformed => match info {
            DriftInfo::Filtered(m) if after => Ok(m / s2),
            DriftInfo::Filtered(_) => Ok(params.mu / s2),
            _ => Err(invalid("partially informed strategy needs the filtered drift")),
        },
    }
}

/// Merton fraction for power utility.
pub fn strategy_power_merton(params: &MarketParams, p: f64) -> Result<f64> {
    UtilitySpec::Power { p }.validate()?;
    Ok(params.mu / ((1.0 - p) * params.sigma * params.sigma))
}

/// Log-utility fractions on the grid (length M+1).
pub fn log_fractions(
    kind: InvestorKind,
    path: &SimulatedPath,
    grid: &TimeGrid,
    params: &MarketParams,
    filter: Option<&FilterOutput>,
) -> Result<Vec<f64>> {
    let s2 = params.sigma * params.sigma;
    match kind {
        InvestorKind::Uninformed => Ok(vec![params.mu / s2; grid.steps + 1]),
        InvestorKind::FullyInformed => Ok(path.market_drifts(grid, params.mu).into_iter().map(|d| d / s2).collect()),
        InvestorKind::PartiallyInformed => {
            let f = filter.ok_or_else(|| invalid("partially informed strategy needs the filter output"))?;
            Ok(f.mu_bar.iter().map(|d| d / s2).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WealthScheme {
    /// x ← x·(1 + π(μᴹΔt + σΔW)).
    #[default]
    Euler,
    /// x ← x·exp(π(μᴹΔt + σΔW) − π²σ²Δt/2), exact for π and μᴹ constant on the step.
    ExactExp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath {
    pub x: Vec<f64>,
    pub pi: Vec<f64>,
}

impl WealthPath {
    pub fn terminal(&self) -> f64 {
        *self.x.last().expect("wealth path is never empty")
    }
}

/// Wealth under per-step fractions, reusing the path's increments.
pub fn evolve_wealth(
    path: &SimulatedPath,
    fractions: &[f64],
    drift: &[f64],
    params: &MarketParams,
    grid: &TimeGrid,
    x0: f64,
    scheme: WealthScheme,
) -> Result<WealthPath> {
    let m_steps = grid.steps;
    if !(x0 > 0.0) {
        return Err(invalid(format!("initial wealth must be > 0, got {x0}")));
    }
    if fractions.len() < m_steps || drift.len() < m_steps || path.dw.len() != m_steps {
        return Err(invalid("fractions, drift and path must cover every step"));
    }
    let (sigma, dt) = (params.sigma, grid.dt);
    let mut x = Vec::with_capacity(m_steps + 1);
    x.push(x0);
    let mut cur = x0;
    for m in 0..m_steps {
        let pi = fractions[m];
        let ret = drift[m] * dt + sigma * path.dw[m];
        cur = match scheme {
            WealthScheme::Euler => cur * (1.0 + pi * ret),
            WealthScheme::ExactExp => cur * (pi * ret - 0.5 * pi * pi * sigma * sigma * dt).exp(),
        };
        if !(cur > 0.0) {
            return Err(Error::Bankruptcy { step: m + 1, wealth: cur });
        }
        x.push(cur);
    }
    Ok(WealthPath { x, pi: fractions[..m_steps].to_vec() })
}

/// x0 / L_T along the path's own increments and true drift.
pub fn log_optimal_wealth_oracle(path: &SimulatedPath, grid: &TimeGrid, params: &MarketParams, x0: f64) -> f64 {
    let drift = path.market_drifts(grid, params.mu);
    x0 * (-log_likelihood(&path.dw, &drift, params, grid)).exp()
}

/// Strategy trace CSV: `step,t,s_market,pi_uninformed,pi_partial,pi_full`.
pub fn write_strategy_trace<W: Write>(
    mut out: W,
    grid: &TimeGrid,
    s_market: &[f64],
    pi_uninformed: &[f64],
    pi_partial: &[f64],
    pi_full: &[f64],
) -> std::io::Result<()> {
    writeln!(out, "step,t,s_market,pi_uninformed,pi_partial,pi_full")?;
    for m in 0..grid.steps {
        writeln!(
            out,
            "{m},{},{},{},{},{}",
            grid.time(m),
            s_market[m],
            pi_uninformed[m],
            pi_partial[m],
            pi_full[m]
        )?;
    }
    Ok(())
}
