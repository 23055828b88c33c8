//! Posterior-mean drift of the market price given observed prices only.
//!
//! The unknown impact parameters are static, so the filter is importance
//! sampling over a fixed cloud of atoms whose log-weights accumulate the
//! Girsanov exponent of each atom's drift after the liquidation time.

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Result};
use crate::market_model::{drift_market, ImpactDistribution, ImpactDraw, JointDensity, MarketParams};
use crate::path_engine::{Purpose, RngSpec, SimulatedPath, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<ImpactDraw>,
    pub log_weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(particles: Vec<ImpactDraw>, log_weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(invalid("particle cloud is empty"));
        }
        if particles.len() != log_weights.len() {
            return Err(invalid("particles and log-weights differ in length"));
        }
        Ok(Self { particles, log_weights })
    }

    pub fn equal(particles: Vec<ImpactDraw>) -> Result<Self> {
        let n = particles.len();
        Self::new(particles, vec![0.0; n])
    }

    pub fn point_mass(draw: ImpactDraw) -> Self {
        Self { particles: vec![draw], log_weights: vec![0.0] }
    }

    /// `n` independent draws from the prior.
    pub fn sample(dist: &ImpactDistribution, n: usize, rng: RngSpec) -> Result<Self> {
        if n == 0 {
            return Err(invalid("particle count must be >= 1"));
        }
        let mut r = rand_chacha::ChaCha8Rng::from_rng(&mut rng.rng(0, Purpose::Particles));
        Self::equal((0..n).map(|_| dist.sample(&mut r)).collect())
    }

    /// Midpoint grid with `per_axis` cells per non-degenerate axis, weighted by
    /// the prior density.
    pub fn grid(dist: &ImpactDistribution, per_axis: usize) -> Result<Self> {
        if per_axis == 0 {
            return Err(invalid("grid cloud needs at least one cell per axis"));
        }
        let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
            if lo == hi {
                vec![lo]
            } else {
                (0..per_axis).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / per_axis as f64).collect()
            }
        };
        let thetas = axis(dist.theta_range);
        let ks = axis(dist.k_range);
        let mut particles = Vec::with_capacity(thetas.len() * ks.len());
        let mut log_weights = Vec::with_capacity(particles.capacity());
        for &theta in &thetas {
            for &k in &ks {
                particles.push(ImpactDraw { theta, k });
                log_weights.push(match dist.density {
                    JointDensity::Uniform => 0.0,
                    JointDensity::Custom { .. } => dist.pdf(theta, k).ln(),
                });
            }
        }
        Self::new(particles, log_weights)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        normalize_log_weights(&self.log_weights)
    }
}

/// exp-normalize with the log-sum-exp shift.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; log_w.len()];
    normalize_into(log_w, &mut out);
    out
}

fn normalize_into(log_w: &[f64], out: &mut [f64]) {
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(log_w) {
        *o = (l - top).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Weighted drift of the cloud at time `t` for a liquidation at `tau`.
pub fn filtered_drift_at(cloud: &ParticleCloud, t: f64, tau: Option<f64>, params: &MarketParams) -> Result<f64> {
    let w = cloud.normalized_weights();
    let mut acc = 0.0;
    for (wi, d) in w.iter().zip(&cloud.particles) {
        acc += wi * drift_market(t, tau, d, params)?;
    }
    Ok(acc)
}

/// Source of the observation increments fed to the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DwqMode {
    /// Relative price change over σ: uses observed prices only.
    #[default]
    Observed,
    /// ΔW plus the true drift, as if the realized draw were known.
    TrueDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// Filtered drift at every grid point (length M+1).
    pub mu_bar: Vec<f64>,
    /// Normalized weights at each post-liquidation grid point, if requested.
    pub snapshots: Option<Vec<Vec<f64>>>,
}

/// A cloud together with the drift of each atom tabulated by steps since
/// liquidation.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    cloud: ParticleCloud,
    /// Row-major `[offset][particle]`.
    table: Vec<f64>,
    offsets: usize,
    dt: f64,
    mu: f64,
    sigma: f64,
}

impl ParticleFilter {
    /// Tabulate drifts for offsets `0..=steps` of width `dt`.
    pub fn new(cloud: ParticleCloud, dt: f64, steps: usize, params: &MarketParams) -> Result<Self> {
        if cloud.is_empty() {
            return Err(invalid("particle cloud is empty"));
        }
        let np = cloud.len();
        let mut table = vec![0.0; np * (steps + 1)];
        for (j, row) in table.chunks_mut(np).enumerate() {
            let elapsed = j as f64 * dt;
            for (slot, d) in row.iter_mut().zip(&cloud.particles) {
                *slot = d.impacted_drift(elapsed, params.mu);
            }
        }
        Ok(Self { cloud, table, offsets: steps + 1, dt, mu: params.mu, sigma: params.sigma })
    }

    pub fn for_grid(cloud: ParticleCloud, grid: &TimeGrid, params: &MarketParams) -> Result<Self> {
        Self::new(cloud, grid.dt, grid.steps, params)
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    /// Filter a post-liquidation observation sequence. `dwq[j]` is the
    /// increment over the step starting `j` steps after liquidation; the result
    /// has `dwq.len() + 1` entries.
    pub fn run_increments(&self, dwq: &[f64], mut snapshots: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        assert!(dwq.len() < self.offsets, "observation sequence longer than the drift table");
        let np = self.cloud.len();
        let mut lw = self.cloud.log_weights.clone();
        let mut w = vec![0.0; np];
        let mut out = Vec::with_capacity(dwq.len() + 1);
        let inv_sigma = 1.0 / self.sigma;
        let half_dt = 0.5 * self.dt * inv_sigma * inv_sigma;
        for j in 0..=dwq.len() {
            let row = &self.table[j * np..(j + 1) * np];
            normalize_into(&lw, &mut w);
            out.push(w.iter().zip(row).map(|(a, b)| a * b).sum());
            if let Some(s) = snapshots.as_deref_mut() {
                s.push(w.clone());
            }
            if let Some(&obs) = dwq.get(j) {
                let x = obs * inv_sigma;
                for (l, &d) in lw.iter_mut().zip(row) {
                    *l += d * x - d * d * half_dt;
                }
            }
        }
        out
    }

    fn observations(&self, path: &SimulatedPath, grid: &TimeGrid, tau: usize, mode: DwqMode) -> Vec<f64> {
        (tau..grid.steps)
            .map(|m| match mode {
                DwqMode::Observed => (path.s_market[m + 1] - path.s_market[m]) / (self.sigma * path.s_market[m]),
                DwqMode::TrueDraw => path.dw[m] + path.market_drift(m, grid, self.mu) * grid.dt / self.sigma,
            })
            .collect()
    }

    pub fn run(&self, path: &SimulatedPath, grid: &TimeGrid, mode: DwqMode) -> FilterOutput {
        self.run_inner(path, grid, mode, false)
    }

    /// Like [`ParticleFilter::run`] but also keeps the weights at every
    /// post-liquidation step.
    pub fn run_traced(&self, path: &SimulatedPath, grid: &TimeGrid, mode: DwqMode) -> FilterOutput {
        self.run_inner(path, grid, mode, true)
    }

    fn run_inner(&self, path: &SimulatedPath, grid: &TimeGrid, mode: DwqMode, trace: bool) -> FilterOutput {
        let mut mu_bar = vec![self.mu; grid.steps + 1];
        let mut snaps = trace.then(Vec::new);
        if let Some(tau) = path.liquidated_before_horizon() {
            let obs = self.observations(path, grid, tau, mode);
            let post = self.run_increments(&obs, snaps.as_mut());
            mu_bar[tau..].copy_from_slice(&post);
        }
        FilterOutput { mu_bar, snapshots: snaps }
    }

    pub fn run_batch(&self, batch: &[SimulatedPath], grid: &TimeGrid, mode: DwqMode) -> Vec<FilterOutput> {
        batch.par_iter().map(|p| self.run(p, grid, mode)).collect()
    }

    /// Weighted mean of the atoms under `weights`.
    pub fn posterior_mean(&self, weights: &[f64]) -> ImpactDraw {
        let mut theta = 0.0;
        let mut k = 0.0;
        for (w, d) in weights.iter().zip(&self.cloud.particles) {
            theta += w * d.theta;
            k += w * d.k;
        }
        ImpactDraw { theta, k }
    }
}

/// Filter one path from scratch.
pub fn run_filter(
    path: &SimulatedPath,
    grid: &TimeGrid,
    params: &MarketParams,
    cloud: &ParticleCloud,
) -> Result<FilterOutput> {
    Ok(ParticleFilter::for_grid(cloud.clone(), grid, params)?.run(path, grid, DwqMode::Observed))
}

/// Innovation increments ΔW + (μᴹ − μ̄)Δt/σ (length M).
pub fn innovations(path: &SimulatedPath, grid: &TimeGrid, params: &MarketParams, mu_bar: &[f64]) -> Vec<f64> {
    (0..grid.steps)
        .map(|m| path.dw[m] + (path.market_drift(m, grid, params.mu) - mu_bar[m]) * grid.dt / params.sigma)
        .collect()
}

/// Filter trace CSV: `step,t,mu_realized,mu_filtered`.
pub fn write_filter_trace<W: Write>(
    mut out: W,
    path: &SimulatedPath,
    grid: &TimeGrid,
    params: &MarketParams,
    output: &FilterOutput,
) -> std::io::Result<()> {
    writeln!(out, "step,t,mu_realized,mu_filtered")?;
    for m in 0..=grid.steps {
        writeln!(out, "{m},{},{},{}", grid.time(m), path.market_drift(m, grid, params.mu), output.mu_bar[m])?;
    }
    Ok(())
}
