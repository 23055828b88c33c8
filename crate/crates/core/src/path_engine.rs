//! Seeded path generation, liquidation detection and path dumps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Result};
use crate::market_model::{ImpactDistribution, ImpactDraw, ImpactFunction, MarketParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(Self { horizon, steps, dt: horizon / steps as f64 })
    }

    /// Calendar time of grid point `m`; the last point is the horizon exactly.
    #[inline]
    pub fn time(&self, m: usize) -> f64 {
        if m == self.steps {
            self.horizon
        } else {
            m as f64 * self.dt
        }
    }

    /// Time elapsed between grid points `from` and `m`.
    #[inline]
    pub fn elapsed(&self, m: usize, from: usize) -> f64 {
        (m - from) as f64 * self.dt
    }
}

/// Seed and stream identifier; every random draw is keyed by these plus the
/// path index and a purpose tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream_id: u64,
}

/// Independent sub-streams of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Increments = 0,
    Impact = 1,
    Bridge = 2,
    Particles = 3,
    Inner = 4,
}

impl RngSpec {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self, index: u64, purpose: Purpose) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream_id.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        key[24..].copy_from_slice(&(purpose as u64).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// A different stream with the same seed.
    pub fn substream(&self, offset: u64) -> Self {
        Self { seed: self.seed, stream_id: self.stream_id.wrapping_add(offset) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Euler,
    ExactLog,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "exact-log" => Ok(Scheme::ExactLog),
            other => Err(format!("unknown scheme '{other}' (expected euler or exact-log)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::ExactLog => "exact-log",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub dw: Vec<f64>,
    pub s_fund: Vec<f64>,
    pub s_market: Vec<f64>,
    pub run_min: Vec<f64>,
    pub tau_index: Option<usize>,
    pub draw: ImpactDraw,
}

impl SimulatedPath {
    /// Liquidation index if it happens strictly before the horizon.
    #[inline]
    pub fn liquidated_before_horizon(&self) -> Option<usize> {
        self.tau_index.filter(|&t| t < self.dw.len())
    }

    /// True drift of the market price at grid point `m`.
    #[inline]
    pub fn market_drift(&self, m: usize, grid: &TimeGrid, mu: f64) -> f64 {
        match self.liquidated_before_horizon() {
            Some(t) if m >= t => self.draw.impacted_drift(grid.elapsed(m, t), mu),
            _ => mu,
        }
    }

    /// True drift at every grid point (length M+1).
    pub fn market_drifts(&self, grid: &TimeGrid, mu: f64) -> Vec<f64> {
        (0..=grid.steps).map(|m| self.market_drift(m, grid, mu)).collect()
    }

    pub fn tau_time(&self, grid: &TimeGrid) -> Option<f64> {
        self.tau_index.map(|t| grid.time(t))
    }
}

/// Smallest index whose price is at or below the barrier.
pub fn detect_liquidation(prices: &[f64], barrier: f64) -> Option<usize> {
    prices.iter().position(|&s| s <= barrier)
}

/// Probability that a log-price bridge between two grid prices touches the
/// barrier.
pub fn bridge_crossing_probability(s_prev: f64, s_next: f64, barrier: f64, sigma: f64, dt: f64) -> f64 {
    if s_prev <= barrier || s_next <= barrier {
        return 1.0;
    }
    let a = (s_prev / barrier).ln();
    let b = (s_next / barrier).ln();
    (-2.0 * a * b / (sigma * sigma * dt)).exp()
}

pub fn bridge_crossing_correction(
    s_prev: f64,
    s_next: f64,
    barrier: f64,
    sigma: f64,
    dt: f64,
    uniform: f64,
) -> bool {
    uniform < bridge_crossing_probability(s_prev, s_next, barrier, sigma, dt)
}

/// Everything needed to generate paths.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub grid: TimeGrid,
    pub params: MarketParams,
    pub dist: ImpactDistribution,
    pub rng: RngSpec,
    pub scheme: Scheme,
    pub bridge_correction: bool,
}

impl Simulator {
    pub fn new(
        grid: TimeGrid,
        params: MarketParams,
        dist: ImpactDistribution,
        rng: RngSpec,
        scheme: Scheme,
    ) -> Result<Self> {
        params.validate()?;
        dist.validate()?;
        if (grid.horizon - params.horizon).abs() > 1e-12 * params.horizon {
            return Err(invalid("grid horizon differs from market horizon"));
        }
        Ok(Self { grid, params, dist, rng, scheme, bridge_correction: false })
    }

    pub fn with_bridge_correction(mut self, on: bool) -> Self {
        self.bridge_correction = on;
        self
    }

    /// Path number `index`; a pure function of the simulator and the index.
    pub fn path(&self, index: u64) -> SimulatedPath {
        let m_steps = self.grid.steps;
        let dt = self.grid.dt;
        let sqdt = dt.sqrt();
        let MarketParams { mu, sigma, s0, .. } = self.params;
        let barrier = self.params.barrier();
        let log_drift = (mu - 0.5 * sigma * sigma) * dt;

        let draw = self.dist.sample(&mut self.rng.rng(index, Purpose::Impact));
        let mut noise = self.rng.rng(index, Purpose::Increments);
        let mut bridge = self.bridge_correction.then(|| self.rng.rng(index, Purpose::Bridge));

        let mut dw = Vec::with_capacity(m_steps);
        let mut s_fund = Vec::with_capacity(m_steps + 1);
        s_fund.push(s0);
        let mut tau = None;
        let mut s = s0;
        for m in 0..m_steps {
            let z: f64 = noise.sample(StandardNormal);
            let inc = sqdt * z;
            let next = match self.scheme {
                Scheme::Euler => s * (1.0 + mu * dt + sigma * inc),
                Scheme::ExactLog => s * (log_drift + sigma * inc).exp(),
            };
            if tau.is_none() {
                if next <= barrier {
                    tau = Some(m + 1);
                } else if let Some(r) = bridge.as_mut() {
                    let u: f64 = r.random();
                    if bridge_crossing_correction(s, next, barrier, sigma, dt, u) {
                        tau = Some(m + 1);
                    }
                }
            }
            dw.push(inc);
            s_fund.push(next);
            s = next;
        }

        let mut s_market = s_fund.clone();
        if let Some(t) = tau {
            for (m, sm) in s_market.iter_mut().enumerate().skip(t) {
                *sm *= draw.value(self.grid.elapsed(m, t));
            }
        }
        let mut run_min = Vec::with_capacity(m_steps + 1);
        let mut lo = f64::INFINITY;
        for &v in &s_market {
            lo = lo.min(v);
            run_min.push(lo);
        }
        SimulatedPath { dw, s_fund, s_market, run_min, tau_index: tau, draw }
    }

    pub fn batch(&self, n: usize) -> Result<Vec<SimulatedPath>> {
        if n == 0 {
            return Err(invalid("path count must be >= 1"));
        }
        Ok((0..n as u64).into_par_iter().map(|i| self.path(i)).collect())
    }

    /// Generate and reduce paths one at a time without storing the batch.
    /// Results come back in path order.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u64, SimulatedPath) -> T + Sync + Send,
    {
        (0..n as u64).into_par_iter().map(|i| f(i, self.path(i))).collect()
    }

    /// Fraction of paths that liquidate by the horizon, with its standard error.
    pub fn liquidation_frequency(&self, n: usize) -> (f64, f64) {
        let hits = self.map(n, |_, p| p.tau_index.is_some() as u64).into_iter().sum::<u64>();
        let p = hits as f64 / n as f64;
        (p, (p * (1.0 - p) / n as f64).sqrt())
    }
}

pub fn simulate_batch(
    grid: TimeGrid,
    params: MarketParams,
    dist: ImpactDistribution,
    n: usize,
    rng: RngSpec,
    scheme: Scheme,
) -> Result<Vec<SimulatedPath>> {
    Simulator::new(grid, params, dist, rng, scheme)?.batch(n)
}

/// CSV dump with one row per path and grid point.
pub fn write_paths_csv<W: Write>(mut out: W, batch: &[SimulatedPath], grid: &TimeGrid) -> std::io::Result<()> {
    writeln!(out, "{PATHS_CSV_HEADER}")?;
    write_path_rows(out, 0, batch, grid)
}

pub const PATHS_CSV_HEADER: &str = "path_id,step,t,s_fund,s_market,run_min,tau_flag";

/// Rows of the path CSV without the header; ids start at `first_id`.
pub fn write_path_rows<W: Write>(mut out: W, first_id: u64, batch: &[SimulatedPath], grid: &TimeGrid) -> std::io::Result<()> {
    for (offset, p) in batch.iter().enumerate() {
        let id = first_id + offset as u64;
        for m in 0..=grid.steps {
            let flag = p.tau_index.is_some_and(|t| m >= t) as u8;
            writeln!(
                out,
                "{id},{m},{},{},{},{},{flag}",
                grid.time(m),
                p.s_fund[m],
                p.s_market[m],
                p.run_min[m]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(scheme: Scheme) -> Simulator {
        let p = MarketParams::default();
        Simulator::new(TimeGrid::new(1.0, 250).unwrap(), p, ImpactDistribution::default(), RngSpec::new(7, 0), scheme)
            .unwrap()
    }

    #[test]
    fn detect_examples() {
        assert_eq!(detect_liquidation(&[80.0; 10], 72.0), None);
        assert_eq!(detect_liquidation(&[80.0, 75.0, 73.0, 72.0, 70.0], 72.0), Some(3));
        let falling: Vec<f64> = (0..=100).map(|i| 80.0 * (1.0 - i as f64 / 100.0)).collect();
        let brute = (0..falling.len()).find(|&i| falling[i] <= 72.0);
        assert_eq!(detect_liquidation(&falling, 72.0), brute);
    }

    #[test]
    fn bridge_probability_limits() {
        assert_eq!(bridge_crossing_probability(80.0, 71.0, 72.0, 0.2, 0.004), 1.0);
        assert!(bridge_crossing_correction(80.0, 72.0, 72.0, 0.2, 0.004, 0.999_999));
        assert!(bridge_crossing_probability(144.0, 144.0, 72.0, 0.2, 1e-6) < 1e-300);
    }

    #[test]
    fn deterministic_upward_path_never_liquidates() {
        let mut s = sim(Scheme::Euler);
        s.params.sigma = 1e-12;
        for p in s.batch(50).unwrap() {
            assert_eq!(p.tau_index, None);
            assert!(p.s_fund.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn same_spec_same_paths() {
        let s = sim(Scheme::Euler);
        assert_eq!(s.batch(20).unwrap(), s.batch(20).unwrap());
        assert_eq!(s.path(13), s.batch(20).unwrap()[13]);
    }

    #[test]
    fn regime_construction_is_multiplicative() {
        let s = sim(Scheme::Euler);
        let grid = s.grid;
        let batch = s.batch(400).unwrap();
        assert!(batch.iter().any(|p| p.tau_index.is_some()));
        for p in &batch {
            let tau = p.tau_index;
            assert_eq!(tau, detect_liquidation(&p.s_market, s.params.barrier()));
            for m in 0..=grid.steps {
                match tau {
                    Some(t) if m >= t => {
                        assert_eq!(p.s_market[m], p.s_fund[m] * p.draw.value(grid.elapsed(m, t)))
                    }
                    _ => assert_eq!(p.s_market[m], p.s_fund[m]),
                }
                assert!(p.s_market[m] > 0.0);
                let lo = p.s_market[..=m].iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(p.run_min[m], lo);
            }
        }
    }

    #[test]
    fn bridge_uses_the_same_increments_and_liquidates_more() {
        let plain = sim(Scheme::ExactLog);
        let corrected = plain.clone().with_bridge_correction(true);
        let a = plain.batch(2000).unwrap();
        let b = corrected.batch(2000).unwrap();
        let mut extra = 0;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.dw, y.dw);
            match (x.tau_index, y.tau_index) {
                (Some(i), Some(j)) => assert!(j <= i),
                (Some(_), None) => panic!("correction removed a liquidation"),
                (None, Some(_)) => extra += 1,
                (None, None) => {}
            }
        }
        assert!(extra > 0);
    }

    #[test]
    fn csv_row_count() {
        let s = sim(Scheme::Euler);
        let batch = s.batch(3).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &batch, &s.grid).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 251);
        assert!(text.starts_with("path_id,step,t,s_fund,s_market,run_min,tau_flag\n"));
    }

    #[test]
    fn rejects_empty_batch() {
        assert!(sim(Scheme::Euler).batch(0).is_err());
    }
}
