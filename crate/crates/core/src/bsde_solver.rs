//! Backward least-squares Monte-Carlo solver for the linear BSDE behind the
//! power-utility hedging demand.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::filtering::{innovations, FilterOutput};
use crate::market_model::MarketParams;
use crate::path_engine::{SimulatedPath, TimeGrid};
use crate::quadrature::gauss_legendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// 1, x, x², y, y², xy with x = S^M − αS₀, y = running min − αS₀.
    #[default]
    Quadratic,
    /// The six above plus (t−τ)⁺ and its square.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub barrier: f64,
}

impl RegressionBasis {
    pub fn count(&self) -> usize {
        match self.kind {
            BasisKind::Quadratic => 6,
            BasisKind::Extended => 8,
        }
    }

    pub fn fill(&self, s_market: f64, run_min: f64, since_tau: f64, out: &mut [f64]) {
        let x = s_market - self.barrier;
        let y = run_min - self.barrier;
        out[0] = 1.0;
        out[1] = x;
        out[2] = x * x;
        out[3] = y;
        out[4] = y * y;
        out[5] = x * y;
        if self.kind == BasisKind::Extended {
            out[6] = since_tau;
            out[7] = since_tau * since_tau;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Ridge {
    /// 1e-8 × mean diagonal of the equilibrated Gram matrix. Ridge weights act
    /// on the equilibrated design and never on the intercept.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftSource {
    #[default]
    FullyInformed,
    Filtered,
}

/// Treatment of grid nodes at or after liquidation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostLiquidation {
    /// The drift is known after τ, so H is propagated with its explicit
    /// one-step factor and Z = 0; only pre-liquidation paths are regressed.
    #[default]
    Explicit,
    /// Every path is regressed at every step.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeConfig {
    pub p: f64,
    pub basis: BasisKind,
    pub ridge: Ridge,
    pub drift_source: DriftSource,
    pub post_liquidation: PostLiquidation,
}

impl BsdeConfig {
    pub fn new(p: f64, drift_source: DriftSource) -> Result<Self> {
        let c = Self {
            p,
            basis: BasisKind::Quadratic,
            ridge: Ridge::Auto,
            drift_source,
            post_liquidation: PostLiquidation::Explicit,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(invalid(format!("p must lie in (0,1), got {}", self.p)));
        }
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0) {
                return Err(invalid(format!("ridge must be >= 0, got {r}")));
            }
        }
        Ok(())
    }
}

/// Least-squares fit of one or more targets on a shared design.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// One coefficient vector per target, in raw feature units.
    pub coefficients: Vec<Vec<f64>>,
}

impl Fit {
    pub fn predict(&self, target: usize, row: &[f64]) -> f64 {
        self.coefficients[target].iter().zip(row).map(|(c, x)| c * x).sum()
    }
}

/// Column scales used to equilibrate the design (root mean square, 1 for a
/// zero column).
pub fn column_scales(features: &[f64], k: usize) -> Vec<f64> {
    let n = features.len() / k;
    let mut s = vec![0.0; k];
    for row in features.chunks_exact(k) {
        for (acc, x) in s.iter_mut().zip(row) {
            *acc += x * x;
        }
    }
    s.iter().map(|&v| if v > 0.0 { (v / n as f64).sqrt() } else { 1.0 }).collect()
}

/// Fit every target in `targets` on the row-major `features` (n × k).
/// Column 0 must be the all-ones intercept; it is solved by centering and
/// carries no ridge weight.
pub fn regress_multi(features: &[f64], k: usize, targets: &[&[f64]], ridge: Ridge) -> Result<Fit> {
    let n = features.len() / k.max(1);
    if k == 0 || features.len() != n * k || targets.iter().any(|t| t.len() != n) {
        return Err(invalid("design and targets disagree in size"));
    }
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let nt = targets.len();
    let y_mean: Vec<f64> = targets.iter().map(|t| t.iter().sum::<f64>() / n as f64).collect();
    if k == 1 {
        return Ok(Fit { coefficients: y_mean.into_iter().map(|m| vec![m]).collect() });
    }
    let scale = column_scales(features, k);
    let q = k - 1;
    let mut x_mean = vec![0.0; q];
    let mut trace = n as f64;
    for row in features.chunks_exact(k) {
        for j in 0..q {
            let v = row[j + 1] / scale[j + 1];
            x_mean[j] += v;
            trace += v * v;
        }
    }
    x_mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DMatrix::<f64>::zeros(q, nt);
    let mut xs = vec![0.0; q];
    for (i, row) in features.chunks_exact(k).enumerate() {
        for j in 0..q {
            xs[j] = row[j + 1] / scale[j + 1] - x_mean[j];
        }
        for a in 0..q {
            for b in a..q {
                gram[(a, b)] += xs[a] * xs[b];
            }
            for (t, y) in targets.iter().enumerate() {
                rhs[(a, t)] += xs[a] * (y[i] - y_mean[t]);
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let lambda = match ridge {
        Ridge::Auto => 1e-8 * trace / k as f64,
        Ridge::Fixed(r) => r,
    };
    for j in 0..q {
        gram[(j, j)] += lambda;
    }
    let chol = gram.cholesky().ok_or(Error::SingularRegression { step: 0 })?;
    if lambda == 0.0 {
        let l = chol.l();
        if (0..q).any(|j| l[(j, j)] * l[(j, j)] <= 1e-13 * n as f64) {
            return Err(Error::SingularRegression { step: 0 });
        }
    }
    let sol = chol.solve(&rhs);
    let coefficients = (0..nt)
        .map(|t| {
            let slopes: Vec<f64> = (0..q).map(|j| sol[(j, t)]).collect();
            let intercept = y_mean[t] - slopes.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
            std::iter::once(intercept)
                .chain(slopes.iter().enumerate().map(|(j, b)| b / scale[j + 1]))
                .collect()
        })
        .collect();
    Ok(Fit { coefficients })
}

/// Single-target least squares.
pub fn regress(targets: &[f64], features: &[f64], k: usize, ridge: Ridge) -> Result<Vec<f64>> {
    Ok(regress_multi(features, k, &[targets], ridge)?.coefficients.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub n_regressed: usize,
    pub coef_h: Vec<f64>,
    pub coef_z: Vec<f64>,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub n_paths: usize,
    pub steps: usize,
    /// Step-major `(M+1) × n`.
    pub h: Vec<f64>,
    /// Step-major `M × n`.
    pub z: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    #[inline]
    pub fn h(&self, path: usize, m: usize) -> f64 {
        self.h[m * self.n_paths + path]
    }

    #[inline]
    pub fn z(&self, path: usize, m: usize) -> f64 {
        self.z[m * self.n_paths + path]
    }

    pub fn h_column(&self, m: usize) -> &[f64] {
        &self.h[m * self.n_paths..(m + 1) * self.n_paths]
    }

    /// Cross-sectional mean of H at t = 0.
    pub fn h0(&self) -> f64 {
        self.h_column(0).iter().sum::<f64>() / self.n_paths as f64
    }
}

/// Paths regressed at step `m` and their feature rows.
pub fn step_design(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    basis: &RegressionBasis,
    post: PostLiquidation,
    m: usize,
) -> (Vec<usize>, Vec<f64>) {
    let k = basis.count();
    let idx: Vec<usize> = (0..batch.len())
        .filter(|&i| post == PostLiquidation::Regression || !is_post(&batch[i], m))
        .collect();
    let mut feats = vec![0.0; idx.len() * k];
    feats.par_chunks_mut(k).zip(idx.par_iter()).for_each(|(row, &i)| {
        let p = &batch[i];
        let since = match p.liquidated_before_horizon() {
            Some(t) if m >= t => grid.elapsed(m, t),
            _ => 0.0,
        };
        basis.fill(p.s_market[m], p.run_min[m], since, row);
    });
    (idx, feats)
}

#[inline]
fn is_post(path: &SimulatedPath, m: usize) -> bool {
    matches!(path.liquidated_before_horizon(), Some(t) if m >= t)
}

/// Per-path drift and noise fed to the BSDE.
struct Inputs {
    drift: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

fn inputs(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    cfg: &BsdeConfig,
    filters: Option<&[FilterOutput]>,
) -> Result<Inputs> {
    match cfg.drift_source {
        DriftSource::FullyInformed => Ok(Inputs {
            drift: batch.par_iter().map(|p| p.market_drifts(grid, params.mu)).collect(),
            noise: batch.iter().map(|p| p.dw.clone()).collect(),
        }),
        DriftSource::Filtered => {
            let f = filters.ok_or_else(|| invalid("filtered drift source needs filter outputs"))?;
            if f.len() != batch.len() {
                return Err(invalid("one filter output per path is required"));
            }
            Ok(Inputs {
                drift: f.iter().map(|o| o.mu_bar.clone()).collect(),
                noise: batch.par_iter().zip(f).map(|(p, o)| innovations(p, grid, params, &o.mu_bar)).collect(),
            })
        }
    }
}

/// Backward recursion from H_T = 1.
pub fn solve_backward(
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    cfg: &BsdeConfig,
    filters: Option<&[FilterOutput]>,
) -> Result<BsdeSolution> {
    cfg.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(invalid("BSDE needs a non-empty batch"));
    }
    let m_steps = grid.steps;
    let dt = grid.dt;
    let p = cfg.p;
    let s2 = params.sigma * params.sigma;
    let z_coef = p / ((1.0 - p) * params.sigma);
    let driver = p / (2.0 * (1.0 - p) * (1.0 - p) * s2);
    let basis = RegressionBasis { kind: cfg.basis, barrier: params.barrier() };
    let k = basis.count();
    let inp = inputs(batch, grid, params, cfg, filters)?;
    let (gl_x, gl_w) = gauss_legendre(4);

    let mut h = vec![0.0; (m_steps + 1) * n];
    let mut z = vec![0.0; m_steps * n];
    h[m_steps * n..].iter_mut().for_each(|v| *v = 1.0);
    let mut diagnostics = Vec::with_capacity(m_steps);

    for m in (0..m_steps).rev() {
        let (next, cur) = {
            let (lo, hi) = h.split_at_mut((m + 1) * n);
            (&hi[..n], &mut lo[m * n..])
        };

        if cfg.post_liquidation == PostLiquidation::Explicit {
            cur.par_iter_mut().enumerate().for_each(|(i, out)| {
                let path = &batch[i];
                if let Some(t) = path.liquidated_before_horizon().filter(|&t| m >= t) {
                    let integral = match cfg.drift_source {
                        DriftSource::FullyInformed => {
                            let (a, b) = (grid.elapsed(m, t), grid.elapsed(m + 1, t));
                            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
                            gl_x.iter()
                                .zip(&gl_w)
                                .map(|(x, w)| {
                                    let d = path.draw.impacted_drift(c + r * x, params.mu);
                                    w * r * d * d
                                })
                                .sum::<f64>()
                        }
                        DriftSource::Filtered => inp.drift[i][m] * inp.drift[i][m] * dt,
                    };
                    *out = next[i] * (driver * integral).exp();
                }
            });
        }

        let (idx, feats) = step_design(batch, grid, &basis, cfg.post_liquidation, m);
        if idx.is_empty() {
            diagnostics.push(StepDiagnostics { step: m, n_regressed: 0, coef_h: vec![], coef_z: vec![], r2: f64::NAN });
            continue;
        }
        let y_h: Vec<f64> = idx.iter().map(|&i| next[i]).collect();
        let intercept_only = m == 0 || idx.len() <= k;
        let (cond_h, coef_h) = if intercept_only {
            let mean = y_h.iter().sum::<f64>() / y_h.len() as f64;
            (vec![mean; idx.len()], vec![mean])
        } else {
            let fit = regress_multi(&feats, k, &[&y_h], cfg.ridge).map_err(|e| at_step(e, m))?;
            let fitted = feats.chunks_exact(k).map(|r| fit.predict(0, r)).collect();
            (fitted, fit.coefficients[0].clone())
        };
        let y_z: Vec<f64> = idx
            .iter()
            .zip(&y_h)
            .zip(&cond_h)
            .map(|((&i, y), c)| (y - c) * inp.noise[i][m] / dt)
            .collect();
        let (cond_z, coef_z) = if intercept_only {
            let mean = y_z.iter().sum::<f64>() / y_z.len() as f64;
            (vec![mean; idx.len()], vec![mean])
        } else {
            let fit = regress_multi(&feats, k, &[&y_z], cfg.ridge).map_err(|e| at_step(e, m))?;
            (feats.chunks_exact(k).map(|r| fit.predict(0, r)).collect(), fit.coefficients[0].clone())
        };

        let mean_y = y_h.iter().sum::<f64>() / y_h.len() as f64;
        let ss_tot: f64 = y_h.iter().map(|y| (y - mean_y).powi(2)).sum();
        let ss_res: f64 = y_h.iter().zip(&cond_h).map(|(y, c)| (y - c).powi(2)).sum();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

        for (j, &i) in idx.iter().enumerate() {
            let d = inp.drift[i][m];
            let denom = 1.0 - driver * d * d * dt;
            if !(denom > 0.0) {
                return Err(Error::DivisionGuard { step: m, denominator: denom });
            }
            cur[i] = (cond_h[j] + z_coef * d * cond_z[j] * dt) / denom;
            z[m * n + i] = cond_z[j];
        }
        diagnostics.push(StepDiagnostics { step: m, n_regressed: idx.len(), coef_h, coef_z, r2 });
    }
    diagnostics.reverse();
    Ok(BsdeSolution { n_paths: n, steps: m_steps, h, z, diagnostics })
}

fn at_step(e: Error, m: usize) -> Error {
    match e {
        Error::SingularRegression { .. } => Error::SingularRegression { step: m },
        other => other,
    }
}

/// Power-utility fractions (M per path): Merton plus hedging demand before
/// liquidation, drift/((1−p)σ²) afterwards.
pub fn strategy_from_solution(
    sol: &BsdeSolution,
    batch: &[SimulatedPath],
    grid: &TimeGrid,
    params: &MarketParams,
    cfg: &BsdeConfig,
    filters: Option<&[FilterOutput]>,
) -> Result<Vec<Vec<f64>>> {
    (0..batch.len()).map(|i| path_strategy(sol, i, &batch[i], grid, params, cfg, filters)).collect()
}

/// Fractions for one path of the batch the solution was computed on.
pub fn path_strategy(
    sol: &BsdeSolution,
    i: usize,
    path: &SimulatedPath,
    grid: &TimeGrid,
    params: &MarketParams,
    cfg: &BsdeConfig,
    filters: Option<&[FilterOutput]>,
) -> Result<Vec<f64>> {
    let s2 = params.sigma * params.sigma;
    let scale = 1.0 / ((1.0 - cfg.p) * s2);
    let mut out = Vec::with_capacity(grid.steps);
    for m in 0..grid.steps {
        if is_post(path, m) {
            let d = match cfg.drift_source {
                DriftSource::FullyInformed => path.market_drift(m, grid, params.mu),
                DriftSource::Filtered => {
                    filters.ok_or_else(|| invalid("filtered strategy needs filter outputs"))?[i].mu_bar[m]
                }
            };
            out.push(d * scale);
        } else {
            let hv = sol.h(i, m);
            if !(hv > 0.0) {
                return Err(Error::NonPositiveH { path: i, step: m, value: hv });
            }
            out.push(params.mu * scale + sol.z(i, m) / (params.sigma * hv));
        }
    }
    Ok(out)
}

/// Fractions for a path outside the regression batch, from the per-step
/// coefficients. `filter` is required for the filtered drift source.
pub fn strategy_for_path(
    sol: &BsdeSolution,
    path: &SimulatedPath,
    filter: Option<&FilterOutput>,
    grid: &TimeGrid,
    params: &MarketParams,
    cfg: &BsdeConfig,
) -> Result<Vec<f64>> {
    if sol.steps != grid.steps || sol.diagnostics.len() != grid.steps {
        return Err(invalid("solution and grid disagree in step count"));
    }
    let s2 = params.sigma * params.sigma;
    let scale = 1.0 / ((1.0 - cfg.p) * s2);
    let z_coef = cfg.p / ((1.0 - cfg.p) * params.sigma);
    let driver = cfg.p / (2.0 * (1.0 - cfg.p) * (1.0 - cfg.p) * s2);
    let basis = RegressionBasis { kind: cfg.basis, barrier: params.barrier() };
    let mut row = vec![0.0; basis.count()];
    let dot = |c: &[f64], r: &[f64]| c.iter().zip(r).map(|(a, b)| a * b).sum::<f64>();
    let mut out = Vec::with_capacity(grid.steps);
    for m in 0..grid.steps {
        if is_post(path, m) {
            let d = match cfg.drift_source {
                DriftSource::FullyInformed => path.market_drift(m, grid, params.mu),
                DriftSource::Filtered => filter.ok_or_else(|| invalid("filtered strategy needs the filter output"))?.mu_bar[m],
            };
            out.push(d * scale);
        } else {
            let diag = &sol.diagnostics[m];
            basis.fill(path.s_market[m], path.run_min[m], 0.0, &mut row);
            let zv = dot(&diag.coef_z, &row);
            let mu = params.mu;
            let hv = (dot(&diag.coef_h, &row) + z_coef * mu * zv * grid.dt) / (1.0 - driver * mu * mu * grid.dt);
            if !(hv > 0.0) {
                return Err(Error::NonPositiveH { path: usize::MAX, step: m, value: hv });
            }
            out.push(mu * scale + zv / (params.sigma * hv));
        }
    }
    Ok(out)
}

/// Per-step diagnostics CSV.
pub fn write_diagnostics<W: Write>(mut out: W, diags: &[StepDiagnostics], k: usize) -> std::io::Result<()> {
    let names: Vec<String> = (0..k)
        .map(|j| format!("h_c{j}"))
        .chain((0..k).map(|j| format!("z_c{j}")))
        .collect();
    writeln!(out, "step,n_regressed,{},r2", names.join(","))?;
    for d in diags {
        let mut cols: Vec<String> = Vec::with_capacity(2 * k);
        for c in [&d.coef_h, &d.coef_z] {
            for j in 0..k {
                cols.push(c.get(j).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        writeln!(out, "{},{},{},{}", d.step, d.n_regressed, cols.join(","), d.r2)?;
    }
    Ok(())
}
