//! First-passage densities and the analytic expected utilities, evaluated by
//! adaptive quadrature.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;
use std::cell::Cell;

use crate::error::{invalid, Error, Result};
use crate::filtering::{DwqMode, ParticleCloud, ParticleFilter};
use crate::market_model::{ImpactDistribution, ImpactDraw, ImpactFunction, MarketParams};
use crate::mc_evaluator::estimate_mean;
use crate::path_engine::{Purpose, RngSpec};
use crate::quadrature::{gauss_legendre_on, integrate, QuadResult, QuadratureSpec};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Drift and barrier of the log-price in Brownian units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaParams {
    pub kappa: f64,
    pub a: f64,
}

impl KappaParams {
    pub fn new(params: &MarketParams) -> Self {
        Self { kappa: params.mu / params.sigma - 0.5 * params.sigma, a: params.alpha.ln() / params.sigma }
    }

    /// Drift seen under the measure tilted by the power-Merton wealth.
    pub fn power(params: &MarketParams, p: f64) -> Self {
        Self {
            kappa: params.mu / ((1.0 - p) * params.sigma) - 0.5 * params.sigma,
            a: params.alpha.ln() / params.sigma,
        }
    }

    /// P(min_{s≤t} (W_s + κs) > a).
    pub fn survival(&self, t: f64) -> f64 {
        let st = t.sqrt();
        let v = normal_cdf((-self.a + self.kappa * t) / st)
            - (2.0 * self.kappa * self.a).exp() * normal_cdf((self.a + self.kappa * t) / st);
        v.clamp(0.0, 1.0)
    }
}

/// P(τ > T).
pub fn prob_no_liquidation(params: &MarketParams) -> f64 {
    KappaParams::new(params).survival(params.horizon)
}

/// P(τ > t) for any t > 0.
pub fn survival_at(t: f64, params: &MarketParams) -> f64 {
    KappaParams::new(params).survival(t)
}

pub fn tau_density(t: f64, params: &MarketParams) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("tau density needs t > 0, got {t}")));
    }
    Ok(tau_density_raw(t, &KappaParams::new(params)))
}

fn tau_density_raw(t: f64, kp: &KappaParams) -> f64 {
    let d = kp.a - kp.kappa * t;
    -kp.a / (2.0 * std::f64::consts::PI * t * t * t).sqrt() * (-d * d / (2.0 * t)).exp()
}

/// Joint density of (B_T, min B) for B_t = W_t + κt.
pub fn joint_density_bm_min(x: f64, y: f64, horizon: f64, kappa: f64) -> f64 {
    if !(y < 0.0 && x > y) {
        return 0.0;
    }
    let t = horizon;
    let u = 2.0 * y - x;
    2.0 * (x - 2.0 * y) / (2.0 * std::f64::consts::PI * t * t * t).sqrt()
        * (kappa * x - 0.5 * kappa * kappa * t - u * u / (2.0 * t)).exp()
}

/// ln x0 plus the Merton log growth.
pub fn merton_log_value(params: &MarketParams, x0: f64) -> f64 {
    x0.ln() + params.mu * params.mu * params.horizon / (2.0 * params.sigma * params.sigma)
}

pub fn merton_power_value(params: &MarketParams, x0: f64, p: f64) -> f64 {
    let s2 = params.sigma * params.sigma;
    x0.powf(p) / p * (p * params.mu * params.mu * params.horizon / (2.0 * (1.0 - p) * s2)).exp()
}

/// Quadrature value with its estimated error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfValue {
    pub value: f64,
    pub quadrature_error: f64,
    /// Monte-Carlo standard error, when part of the value is simulated.
    pub se: Option<f64>,
}

/// Collects nonconvergence from nested integrals.
struct Tracker {
    failed: Cell<Option<f64>>,
}

impl Tracker {
    fn new() -> Self {
        Self { failed: Cell::new(None) }
    }

    fn run<F: FnMut(f64) -> f64>(&self, f: F, a: f64, b: f64, spec: &QuadratureSpec) -> f64 {
        let r = integrate(f, a, b, spec);
        self.note(&r);
        r.value
    }

    fn note(&self, r: &QuadResult) {
        if !r.converged {
            let prev = self.failed.get().unwrap_or(0.0);
            self.failed.set(Some(prev.max(r.error)));
        }
    }

    fn finish(&self, outer: QuadResult, spec: &QuadratureSpec) -> Result<CfValue> {
        if let Some(achieved) = self.failed.get() {
            return Err(Error::QuadratureNonConvergence { achieved, requested: spec.abs_tol });
        }
        let r = outer.check(spec)?;
        Ok(CfValue { value: r.value, quadrature_error: r.error, se: None })
    }
}

fn inner_spec(spec: &QuadratureSpec) -> QuadratureSpec {
    spec.scaled(1e-3)
}

/// E_φ[f(Θ, K)] by nested quadrature; degenerate axes are point masses.
fn expect_over<F: Fn(ImpactDraw) -> f64>(dist: &ImpactDistribution, spec: &QuadratureSpec, tr: &Tracker, f: F) -> f64 {
    let (tl, th) = dist.theta_range;
    let (kl, kh) = dist.k_range;
    let weighted = |theta: f64, k: f64| dist.pdf(theta, k) * f(ImpactDraw { theta, k });
    match (dist.theta_degenerate(), dist.k_degenerate()) {
        (true, true) => f(ImpactDraw { theta: tl, k: kl }),
        (true, false) => tr.run(|k| weighted(tl, k), kl, kh, spec),
        (false, true) => tr.run(|theta| weighted(theta, kl), tl, th, spec),
        (false, false) => tr.run(|theta| tr.run(|k| weighted(theta, k), kl, kh, spec), tl, th, spec),
    }
}

/// ∫_t^T (impacted drift)²/(2σ²) dv for a liquidation at t.
pub fn impact_drift_sq_integral(t: f64, theta: f64, k: f64, params: &MarketParams, spec: &QuadratureSpec) -> Result<f64> {
    if t > params.horizon {
        return Err(invalid("liquidation time beyond the horizon"));
    }
    let d = ImpactDraw::new(theta, k)?;
    let r = drift_sq_integral(&d, params.horizon - t, params, spec).check(spec)?;
    Ok(r.value)
}

fn drift_sq_integral(d: &ImpactDraw, len: f64, params: &MarketParams, spec: &QuadratureSpec) -> QuadResult {
    let c = 1.0 / (2.0 * params.sigma * params.sigma);
    // The integrand varies on the scale Θ; split there so the rule sees the bump.
    let knee = (4.0 * d.theta).min(len);
    let f = |s: f64| {
        let m = d.impacted_drift(s, params.mu);
        c * m * m
    };
    let a = integrate(f, 0.0, knee, spec);
    let b = integrate(f, knee, len, spec);
    QuadResult { value: a.value + b.value, error: a.error + b.error, converged: a.converged && b.converged }
}

/// ln X at liquidation time t for the log-Merton wealth, as a function of t.
fn log_wealth_at_tau(t: f64, params: &MarketParams, x0: f64) -> f64 {
    let s2 = params.sigma * params.sigma;
    x0.ln() + params.mu * params.alpha.ln() / s2 + 0.5 * params.mu * t - params.mu * params.mu * t / (2.0 * s2)
}

/// Survival term plus the (x, y) double integral, shared by every log value.
fn no_liquidation_log_terms(params: &MarketParams, x0: f64, spec: &QuadratureSpec) -> Result<CfValue> {
    let kp = KappaParams::new(params);
    let t = params.horizon;
    let s2 = params.sigma * params.sigma;
    let survival = kp.survival(t) * (x0.ln() + 0.5 * (params.mu - params.mu * params.mu / s2) * t);
    let tr = Tracker::new();
    let width = 10.0 * t.sqrt();
    let ispec = inner_spec(spec);
    let coef = params.mu / params.sigma;
    let outer = integrate(
        |y| tr.run(|x| coef * x * joint_density_bm_min(x, y, t, kp.kappa), y, y + width, &ispec),
        kp.a,
        0.0,
        spec,
    );
    let mut v = tr.finish(outer, spec)?;
    v.value += survival;
    Ok(v)
}

/// Expected log utility of the fully informed investor for a known draw.
pub fn v_log_fully(params: &MarketParams, draw: &ImpactDraw, x0: f64, spec: &QuadratureSpec) -> Result<CfValue> {
    v_log_fully_averaged(params, &ImpactDistribution::point_mass(*draw), x0, spec)
}

/// Fully informed log value averaged over the impact law.
pub fn v_log_fully_averaged(
    params: &MarketParams,
    dist: &ImpactDistribution,
    x0: f64,
    spec: &QuadratureSpec,
) -> Result<CfValue> {
    params.validate()?;
    let base = no_liquidation_log_terms(params, x0, spec)?;
    let kp = KappaParams::new(params);
    let t_end = params.horizon;
    let tr = Tracker::new();
    let ispec = inner_spec(spec);
    let outer = integrate(
        |t| {
            let post = expect_over(dist, &ispec, &tr, |d| {
                let r = drift_sq_integral(&d, t_end - t, params, &ispec.scaled(1e-2));
                tr.note(&r);
                r.value
            });
            tau_density_raw(t, &kp) * (log_wealth_at_tau(t, params, x0) + post)
        },
        0.0,
        t_end,
        spec,
    );
    let liq = tr.finish(outer, spec)?;
    Ok(CfValue { value: base.value + liq.value, quadrature_error: base.quadrature_error + liq.quadrature_error, se: None })
}

/// Expected log utility of the investor who keeps the Merton fraction.
pub fn v_log_uninformed(params: &MarketParams, dist: &ImpactDistribution, x0: f64, spec: &QuadratureSpec) -> Result<CfValue> {
    params.validate()?;
    let base = no_liquidation_log_terms(params, x0, spec)?;
    let kp = KappaParams::new(params);
    let (mu, s2, t_end) = (params.mu, params.sigma * params.sigma, params.horizon);
    let tr = Tracker::new();
    let ispec = inner_spec(spec);
    let outer = integrate(
        |t| {
            let len = t_end - t;
            let post = expect_over(dist, &ispec, &tr, |d| mu * d.log_value(len) / s2);
            tau_density_raw(t, &kp) * (log_wealth_at_tau(t, params, x0) + mu * mu * len / (2.0 * s2) + post)
        },
        0.0,
        t_end,
        spec,
    );
    let liq = tr.finish(outer, spec)?;
    Ok(CfValue { value: base.value + liq.value, quadrature_error: base.quadrature_error + liq.quadrature_error, se: None })
}

/// Expected power utility of the investor who keeps the power Merton fraction.
pub fn v_power_uninformed(
    params: &MarketParams,
    dist: &ImpactDistribution,
    x0: f64,
    p: f64,
    spec: &QuadratureSpec,
) -> Result<CfValue> {
    params.validate()?;
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("p must lie in (0,1), got {p}")));
    }
    let (mu, s2, t_end) = (params.mu, params.sigma * params.sigma, params.horizon);
    let scale = x0.powf(p) / p;
    let q = 1.0 - p;
    let survival = scale * (p * mu * mu * t_end / (2.0 * q * s2)).exp() * KappaParams::power(params, p).survival(t_end);
    let kp = KappaParams::new(params);
    let tr = Tracker::new();
    let ispec = inner_spec(spec);
    let outer = integrate(
        |t| {
            let len = t_end - t;
            let log_x_tau = mu * params.alpha.ln() / (q * s2) + mu * t / (2.0 * q) - mu * mu * t / (2.0 * q * q * s2);
            let growth = p * mu * mu * len / (2.0 * q * s2);
            let post = expect_over(dist, &ispec, &tr, |d| (p * mu * d.log_value(len) / (q * s2)).exp());
            tau_density_raw(t, &kp) * scale * (p * log_x_tau + growth).exp() * post
        },
        0.0,
        t_end,
        spec,
    );
    let liq = tr.finish(outer, spec)?;
    Ok(CfValue { value: survival + liq.value, quadrature_error: liq.quadrature_error, se: None })
}

/// Monte-Carlo budget of the partially informed log value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialBudget {
    /// Gauss–Legendre nodes for the liquidation-time integral.
    pub outer_nodes: usize,
    /// Inner replicates (impact draw plus post-liquidation noise).
    pub inner_samples: usize,
    /// Cells per axis of the filter's grid cloud.
    pub cloud_per_axis: usize,
    /// Filter time step.
    pub dt: f64,
    pub dwq_mode: DwqMode,
    pub rng: RngSpec,
}

impl Default for PartialBudget {
    fn default() -> Self {
        Self {
            outer_nodes: 24,
            inner_samples: 400,
            cloud_per_axis: 20,
            dt: 1.0 / 250.0,
            dwq_mode: DwqMode::Observed,
            rng: RngSpec::new(2024, 7),
        }
    }
}

/// Partially informed log value: quadrature for the deterministic terms,
/// nested Monte Carlo for E[∫(filtered drift)²/(2σ²) | τ = t].
pub fn v_log_partial(
    params: &MarketParams,
    dist: &ImpactDistribution,
    x0: f64,
    budget: &PartialBudget,
    spec: &QuadratureSpec,
) -> Result<CfValue> {
    params.validate()?;
    if budget.outer_nodes == 0 || budget.inner_samples < 2 || !(budget.dt > 0.0) {
        return Err(invalid("partial-value budget needs nodes, >= 2 inner samples and dt > 0"));
    }
    let base = no_liquidation_log_terms(params, x0, spec)?;
    let kp = KappaParams::new(params);
    let (mu, sigma, t_end) = (params.mu, params.sigma, params.horizon);
    let tr = Tracker::new();
    let at_tau = integrate(|t| tau_density_raw(t, &kp) * log_wealth_at_tau(t, params, x0), 0.0, t_end, spec);
    let at_tau = tr.finish(at_tau, spec)?;

    let cloud = ParticleCloud::grid(dist, budget.cloud_per_axis)?;
    let (nodes, weights) = gauss_legendre_on(budget.outer_nodes, 0.0, t_end);
    let n_max = (t_end / budget.dt).ceil() as usize + 1;
    let filters: Vec<(usize, f64, f64, ParticleFilter)> = nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| {
            let len = t_end - t;
            let steps = ((len / budget.dt).round() as usize).max(1);
            let h = len / steps as f64;
            let f = ParticleFilter::new(cloud.clone(), h, steps, params)?;
            Ok((steps, h, w * tau_density_raw(t, &kp), f))
        })
        .collect::<Result<_>>()?;

    let c = 1.0 / (2.0 * sigma * sigma);
    let replicates: Vec<f64> = (0..budget.inner_samples as u64)
        .into_par_iter()
        .map(|r| {
            let draw = dist.sample(&mut budget.rng.rng(r, Purpose::Impact));
            let mut noise = budget.rng.rng(r, Purpose::Inner);
            let z: Vec<f64> = (0..n_max).map(|_| noise.sample(StandardNormal)).collect();
            let mut total = 0.0;
            for (steps, h, weight, filter) in &filters {
                let sq = h.sqrt();
                let obs: Vec<f64> = match budget.dwq_mode {
                    DwqMode::TrueDraw => (0..*steps)
                        .map(|j| sq * z[j] + draw.impacted_drift(j as f64 * h, mu) * h / sigma)
                        .collect(),
                    DwqMode::Observed => {
                        let mut s = params.barrier();
                        let mut prev = s;
                        (0..*steps)
                            .map(|j| {
                                s *= 1.0 + mu * h + sigma * sq * z[j];
                                let sm = s * draw.value((j + 1) as f64 * h);
                                let o = (sm - prev) / (sigma * prev);
                                prev = sm;
                                o
                            })
                            .collect()
                    }
                };
                let mb = filter.run_increments(&obs, None);
                let mut acc = 0.5 * (mb[0] * mb[0] + mb[*steps] * mb[*steps]);
                acc += mb[1..*steps].iter().map(|m| m * m).sum::<f64>();
                total += weight * c * acc * h;
            }
            total
        })
        .collect();
    let mc = estimate_mean(&replicates)?;
    Ok(CfValue {
        value: base.value + at_tau.value + mc.mean,
        quadrature_error: base.quadrature_error + at_tau.quadrature_error,
        se: Some(mc.se),
    })
}

/// JSON record of one analytic value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormRecord {
    pub investor: String,
    pub utility: String,
    pub value: f64,
    pub se_if_any: Option<f64>,
    pub quadrature_error: f64,
}

impl ClosedFormRecord {
    pub fn new(investor: &str, utility: &str, v: &CfValue) -> Self {
        Self {
            investor: investor.into(),
            utility: utility.into(),
            value: v.value,
            se_if_any: v.se,
            quadrature_error: v.quadrature_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p6() -> MarketParams {
        MarketParams::default()
    }

    #[test]
    fn normal_cdf_examples() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(10.0) - 1.0).abs() < 1e-12);
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-4);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn survival_limits_and_value() {
        let mut p = p6();
        p.alpha = 1e-12;
        assert!((prob_no_liquidation(&p) - 1.0).abs() < 1e-12);
        p.alpha = 1.0 - 1e-12;
        assert!(prob_no_liquidation(&p) < 1e-4);
        let v = prob_no_liquidation(&p6());
        assert!((v - 0.480_93).abs() < 1e-4, "{v}");
        // Reflection coefficient equals the alternative exponent form.
        let kp = KappaParams::new(&p6());
        let alt = 2.0 * 0.07 * 0.9f64.ln() / 0.04 - 0.9f64.ln();
        assert!((2.0 * kp.kappa * kp.a - alt).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_liquidation_probability() {
        let p = p6();
        let spec = QuadratureSpec::default();
        let r = integrate(|t| tau_density(t, &p).unwrap(), 0.0, 1.0, &spec);
        assert!((r.value - (1.0 - prob_no_liquidation(&p))).abs() < 1e-6);
        assert!(tau_density(1e-6, &p).unwrap() < 1e-300);
        assert!(tau_density(0.0, &p).is_err());
        let h = 1e-5;
        let fd = (survival_at(0.25 - h, &p) - survival_at(0.25 + h, &p)) / (2.0 * h);
        assert!((fd - tau_density(0.25, &p).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn joint_density_support() {
        assert_eq!(joint_density_bm_min(0.5, 0.1, 1.0, 0.25), 0.0);
        assert_eq!(joint_density_bm_min(-0.5, -0.4, 1.0, 0.25), 0.0);
    }

    /// Composite trapezoid with Richardson extrapolation.
    fn richardson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
        let trap = |n: usize| {
            let h = (b - a) / n as f64;
            let mut s = 0.5 * (f(a) + f(b));
            for i in 1..n {
                s += f(a + i as f64 * h);
            }
            s * h
        };
        let mut row: Vec<f64> = (0..8).map(|j| trap(64 << j)).collect();
        let mut pow = 4.0;
        while row.len() > 1 {
            row = row.windows(2).map(|w| (pow * w[1] - w[0]) / (pow - 1.0)).collect();
            pow *= 4.0;
        }
        row[0]
    }

    #[test]
    fn drift_sq_integral_examples() {
        let p = p6();
        let spec = QuadratureSpec::default();
        assert_eq!(impact_drift_sq_integral(1.0, 0.1, 0.05, &p, &spec).unwrap(), 0.0);
        let flat = impact_drift_sq_integral(0.3, 0.1, 0.0, &p, &spec).unwrap();
        assert!((flat - 0.0049 * 0.7 / 0.08).abs() < 1e-12);
        let tight = QuadratureSpec { rel_tol: 1e-11, abs_tol: 1e-13, max_depth: 40 };
        let v = impact_drift_sq_integral(0.5, 0.1, 0.05, &p, &tight).unwrap();
        let d = ImpactDraw { theta: 0.1, k: 0.05 };
        let oracle = richardson(|s| d.impacted_drift(s, 0.07).powi(2) / 0.08, 0.0, 0.5);
        assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
    }

    #[test]
    fn merton_reductions() {
        let spec = QuadratureSpec::default();
        let p = p6();
        let no_impact = ImpactDistribution::uniform(0.05, 0.15, 0.0, 0.0).unwrap();
        let m = merton_log_value(&p, 80.0);
        let v = v_log_uninformed(&p, &no_impact, 80.0, &spec).unwrap().value;
        assert!((v / m - 1.0).abs() < 1e-6, "{v} vs {m}");
        let v = v_log_fully(&p, &ImpactDraw { theta: 0.1, k: 0.0 }, 80.0, &spec).unwrap().value;
        assert!((v / m - 1.0).abs() < 1e-6, "{v} vs {m}");
        let mp = merton_power_value(&p, 80.0, 0.5);
        let v = v_power_uninformed(&p, &no_impact, 80.0, 0.5, &spec).unwrap().value;
        assert!((v / mp - 1.0).abs() < 1e-6, "{v} vs {mp}");
        let mut far = p;
        far.alpha = 1e-9;
        let v = v_log_fully_averaged(&far, &ImpactDistribution::default(), 80.0, &spec).unwrap().value;
        assert!((v / m - 1.0).abs() < 1e-6);
        let v = v_power_uninformed(&far, &ImpactDistribution::default(), 80.0, 0.5, &spec).unwrap().value;
        assert!((v / mp - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reference_parameter_values() {
        let spec = QuadratureSpec::default();
        let p = p6();
        let dist = ImpactDistribution::default();
        let un = v_log_uninformed(&p, &dist, 80.0, &spec).unwrap().value;
        let full = v_log_fully_averaged(&p, &dist, 80.0, &spec).unwrap().value;
        let pow = v_power_uninformed(&p, &dist, 80.0, 0.5, &spec).unwrap().value;
        assert!((un - 4.4375).abs() < 1e-3, "{un}");
        assert!((full - 4.8189).abs() < 1e-3, "{full}");
        assert!((pow - 18.9389).abs() < 1e-3, "{pow}");
    }

    #[test]
    fn partial_with_no_impact_is_merton() {
        let spec = QuadratureSpec::default();
        let p = p6();
        let no_impact = ImpactDistribution::uniform(0.05, 0.15, 0.0, 0.0).unwrap();
        let budget = PartialBudget { inner_samples: 4, outer_nodes: 32, ..Default::default() };
        let v = v_log_partial(&p, &no_impact, 80.0, &budget, &spec).unwrap();
        let m = merton_log_value(&p, 80.0);
        assert!((v.value - m).abs() < 1e-6, "{} vs {m}", v.value);
    }
}
