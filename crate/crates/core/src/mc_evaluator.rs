//! Sample-mean estimators, likelihood processes and expected-utility
//! evaluation over a simulated batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filtering::{innovations, FilterOutput};
use crate::market_model::MarketParams;
use crate::path_engine::{SimulatedPath, TimeGrid};
use crate::strategies::{evolve_wealth, UtilitySpec, WealthScheme};

const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub rse: f64,
    pub ci95: (f64, f64),
    pub n_effective: usize,
    pub n_excluded: usize,
}

impl Estimate {
    /// Whether `[lo, hi]` widened by `k` standard errors contains the mean.
    pub fn within(&self, lo: f64, hi: f64, k: f64) -> bool {
        self.mean >= lo - k * self.se && self.mean <= hi + k * self.se
    }
}

/// Sum in a fixed pairwise order, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 64 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub fn estimate_mean(samples: &[f64]) -> Result<Estimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    // Shift by the first sample: exact for constant data, less cancellation otherwise.
    let shift = samples[0];
    let centred: Vec<f64> = samples.iter().map(|x| x - shift).collect();
    let mean = shift + pairwise_sum(&centred) / n as f64;
    let dev: Vec<f64> = samples.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let rse = if mean != 0.0 { se / mean.abs() } else { f64::INFINITY };
    Ok(Estimate {
        mean,
        se,
        rse,
        ci95: (mean - Z95 * se, mean + Z95 * se),
        n_effective: n,
        n_excluded: 0,
    })
}

/// Running log of a likelihood process exp(Σ −(d/σ)ΔW − d²Δt/(2σ²)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodAccumulator {
    log_l: f64,
    sigma: f64,
    dt: f64,
}

impl LikelihoodAccumulator {
    pub fn new(sigma: f64, dt: f64) -> Self {
        Self { log_l: 0.0, sigma, dt }
    }

    #[inline]
    pub fn step(&mut self, drift: f64, dw: f64) {
        let r = drift / self.sigma;
        self.log_l -= r * dw + 0.5 * r * r * self.dt;
    }

    pub fn log_value(&self) -> f64 {
        self.log_l
    }

    pub fn value(&self) -> f64 {
        self.log_l.exp()
    }
}

/// ln L_T for the given increments and per-step drifts.
pub fn log_likelihood(increments: &[f64], drift: &[f64], params: &MarketParams, grid: &TimeGrid) -> f64 {
    let mut acc = LikelihoodAccumulator::new(params.sigma, grid.dt);
    for (dw, d) in increments.iter().zip(drift) {
        acc.step(*d, *dw);
    }
    acc.log_value()
}

pub fn accumulate_likelihood(increments: &[f64], drift: &[f64], params: &MarketParams, grid: &TimeGrid) -> Result<f64> {
    if drift.len() < increments.len() {
        return Err(invalid("drift shorter than the increment sequence"));
    }
    Ok(log_likelihood(increments, drift, params, grid).exp())
}

/// ln L̄_T of one path: the likelihood built from the filtered drift and the
/// innovation increments.
pub fn innovations_log_likelihood(path: &SimulatedPath, grid: &TimeGrid, params: &MarketParams, mu_bar: &[f64]) -> f64 {
    log_likelihood(&innovations(path, grid, params, mu_bar), mu_bar, params, grid)
}

/// What the informed investor knows about the post-liquidation drift.
#[derive(Debug, Clone, Copy)]
pub enum InformedDrift<'a> {
    Full,
    Partial(&'a [FilterOutput]),
}

/// ln L_T (fully informed) or ln L̄_T (partially informed) for every path.
pub fn log_likelihoods(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    source: InformedDrift<'_>,
) -> Result<Vec<f64>> {
    if let InformedDrift::Partial(f) = source {
        if f.len() != batch.len() {
            return Err(invalid("one filter output per path is required"));
        }
    }
    Ok(batch
        .par_iter()
        .enumerate()
        .map(|(i, p)| match source {
            InformedDrift::Full => log_likelihood(&p.dw, &p.market_drifts(grid, params.mu), params, grid),
            InformedDrift::Partial(f) => innovations_log_likelihood(p, grid, params, &f[i].mu_bar),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    /// Expected utility; `ci95` maps the ξ interval, `se` is the delta-method SE.
    pub value: Estimate,
    /// Mean of L^{p/(p−1)}.
    pub xi: Estimate,
}

/// Informed power utility through the likelihood functional.
pub fn mc_power_informed(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    p: f64,
    x0: f64,
    source: InformedDrift<'_>,
) -> Result<PowerEstimate> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("power exponent must lie in (0,1), got {p}")));
    }
    let expo = p / (p - 1.0);
    let xi_samples: Vec<f64> = log_likelihoods(batch, grid, params, source)?
        .into_iter()
        .map(|l| (expo * l).exp())
        .collect();
    let xi = estimate_mean(&xi_samples)?;
    Ok(PowerEstimate { value: power_value_from_xi(&xi, p, x0), xi })
}

/// Map a ξ estimate through v(ξ) = (x0^p/p)·ξ^{1−p}.
pub fn power_value_from_xi(xi: &Estimate, p: f64, x0: f64) -> Estimate {
    let scale = x0.powf(p) / p;
    let v = |x: f64| scale * x.max(0.0).powf(1.0 - p);
    let mean = v(xi.mean);
    let se = (1.0 - p) * mean * xi.se / xi.mean;
    Estimate {
        mean,
        se,
        rse: se / mean.abs(),
        ci95: (v(xi.ci95.0), v(xi.ci95.1)),
        n_effective: xi.n_effective,
        n_excluded: xi.n_excluded,
    }
}

/// Evolve wealth on every path under `fractions` and average U(X_T).
/// Bankrupt paths are excluded and counted.
pub fn mc_utility_by_wealth<F>(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    utility: UtilitySpec,
    x0: f64,
    scheme: WealthScheme,
    fractions: F,
) -> Result<Estimate>
where
    F: Fn(usize, &SimulatedPath) -> Vec<f64> + Sync,
{
    utility.validate()?;
    let outcomes: Vec<Option<f64>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let pi = fractions(i, path);
            let drift = path.market_drifts(grid, params.mu);
            match evolve_wealth(path, &pi, &drift, params, grid, x0, scheme) {
                Ok(w) => Some(utility.apply(w.terminal())),
                Err(_) => None,
            }
        })
        .collect();
    let kept: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let mut est = estimate_mean(&kept)?;
    est.n_excluded = outcomes.len() - kept.len();
    Ok(est)
}

/// JSON record of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub investor: String,
    pub utility: String,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub rse: f64,
    pub ci95: (f64, f64),
    pub n_excluded: usize,
    pub seed: u64,
    pub scheme: String,
    #[serde(rename = "M")]
    pub steps: usize,
}

impl EvaluationRecord {
    pub fn new(investor: &str, utility: &str, est: &Estimate, seed: u64, scheme: &str, steps: usize) -> Self {
        Self {
            investor: investor.to_string(),
            utility: utility.to_string(),
            n: est.n_effective + est.n_excluded,
            mean: est.mean,
            se: est.se,
            rse: est.rse,
            ci95: est.ci95,
            n_excluded: est.n_excluded,
            seed,
            scheme: scheme.to_string(),
            steps,
        }
    }
}
