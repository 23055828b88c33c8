//! Fundamental dynamics, liquidation barrier, impact functions and the
//! regime-switching market drift.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// Constants of the fundamental price and of the liquidation trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub mu: f64,
    pub sigma: f64,
    pub s0: f64,
    pub alpha: f64,
    pub horizon: f64,
}

impl MarketParams {
    pub fn new(mu: f64, sigma: f64, s0: f64, alpha: f64, horizon: f64) -> Result<Self> {
        let p = Self { mu, sigma, s0, alpha, horizon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(invalid("mu must be finite"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return Err(invalid(format!("s0 must be > 0, got {}", self.s0)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon must be > 0, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Liquidation barrier α·S₀.
    pub fn barrier(&self) -> f64 {
        self.alpha * self.s0
    }

    /// Merton fraction for log utility.
    pub fn merton_log_fraction(&self) -> f64 {
        self.mu / (self.sigma * self.sigma)
    }
}

impl Default for MarketParams {
    fn default() -> Self {
        Self { mu: 0.07, sigma: 0.2, s0: 80.0, alpha: 0.9, horizon: 1.0 }
    }
}

/// Anything that can play the role of the post-liquidation price factor.
pub trait ImpactFunction {
    /// Factor applied to the fundamental price `t` years after liquidation.
    fn value(&self, t: f64) -> f64;
    /// Time derivative of [`ImpactFunction::value`].
    fn derivative(&self, t: f64) -> f64;

    /// g'/g, the impact contribution to the market drift.
    fn log_derivative(&self, t: f64) -> f64 {
        self.derivative(t) / self.value(t)
    }
}

/// Realized impact speed and magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactDraw {
    pub theta: f64,
    pub k: f64,
}

impl ImpactDraw {
    pub fn new(theta: f64, k: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(invalid(format!("theta must be > 0, got {theta}")));
        }
        if !(0.0..1.0).contains(&k) {
            return Err(invalid(format!("k must lie in [0,1), got {k}")));
        }
        Ok(Self { theta, k })
    }

    /// Drift of the impacted price, `elapsed` years after liquidation.
    #[inline]
    pub fn impacted_drift(&self, elapsed: f64, mu: f64) -> f64 {
        let x = elapsed / self.theta;
        let e = (1.0 - x).exp();
        let g = 1.0 - self.k * x * e;
        let gp = self.k / self.theta * e * (x - 1.0);
        mu + gp / g
    }

    /// ln g(t).
    #[inline]
    pub fn log_value(&self, t: f64) -> f64 {
        (-self.k * t / self.theta * (1.0 - t / self.theta).exp()).ln_1p()
    }
}

impl ImpactFunction for ImpactDraw {
    #[inline]
    fn value(&self, t: f64) -> f64 {
        let x = t / self.theta;
        1.0 - self.k * x * (1.0 - x).exp()
    }

    #[inline]
    fn derivative(&self, t: f64) -> f64 {
        let x = t / self.theta;
        self.k / self.theta * (1.0 - x).exp() * (x - 1.0)
    }
}

/// Four-parameter impact with a permanent part `k1` and a temporary part `k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactDraw4 {
    pub theta1: f64,
    pub theta2: f64,
    pub k1: f64,
    pub k2: f64,
}

impl ImpactDraw4 {
    pub fn new(theta1: f64, theta2: f64, k1: f64, k2: f64) -> Result<Self> {
        if !(theta1 > 0.0 && theta2 > 0.0) {
            return Err(invalid("theta1 and theta2 must be > 0"));
        }
        if !(k1 >= 0.0 && k2 >= 0.0 && k1 + k2 < 1.0) {
            return Err(invalid("need k1, k2 >= 0 and k1 + k2 < 1"));
        }
        Ok(Self { theta1, theta2, k1, k2 })
    }

    fn shifted(&self, t: f64) -> f64 {
        (t + self.theta2 - self.theta1) / self.theta2
    }

    /// Value on the branch t < Θ₁, evaluated anywhere (used for continuity checks).
    pub fn left_branch(&self, t: f64) -> f64 {
        let x = t / self.theta1;
        1.0 - (self.k1 + self.k2) * x * (1.0 - x).exp()
    }

    /// Value on the branch t ≥ Θ₁, evaluated anywhere.
    pub fn right_branch(&self, t: f64) -> f64 {
        let s = self.shifted(t);
        1.0 - self.k1 - self.k2 * s * (1.0 - s).exp()
    }
}

impl ImpactFunction for ImpactDraw4 {
    fn value(&self, t: f64) -> f64 {
        if t < self.theta1 {
            self.left_branch(t)
        } else {
            self.right_branch(t)
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        if t < self.theta1 {
            let x = t / self.theta1;
            (self.k1 + self.k2) / self.theta1 * (1.0 - x).exp() * (x - 1.0)
        } else {
            let s = self.shifted(t);
            self.k2 / self.theta2 * (1.0 - s).exp() * (s - 1.0)
        }
    }
}

fn check_elapsed(t: f64) -> Result<()> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Domain(format!("elapsed time must be >= 0, got {t}")));
    }
    Ok(())
}

/// g(t) = 1 − (K t/Θ)·exp(1 − t/Θ).
pub fn impact_g(t: f64, draw: &ImpactDraw) -> Result<f64> {
    check_elapsed(t)?;
    Ok(draw.value(t))
}

/// Analytic derivative of [`impact_g`].
pub fn impact_g_prime(t: f64, draw: &ImpactDraw) -> Result<f64> {
    check_elapsed(t)?;
    Ok(draw.derivative(t))
}

pub fn impact_g4(t: f64, draw: &ImpactDraw4) -> Result<f64> {
    check_elapsed(t)?;
    Ok(draw.value(t))
}

/// Drift of the impacted market price at time `t` for a liquidation at `u`.
pub fn drift_impacted<I: ImpactFunction>(t: f64, u: f64, draw: &I, params: &MarketParams) -> Result<f64> {
    let elapsed = t - u;
    check_elapsed(elapsed)?;
    let g = draw.value(elapsed);
    if g <= 0.0 {
        return Err(Error::Domain(format!("impact factor {g} is not positive")));
    }
    Ok(draw.derivative(elapsed) / g + params.mu)
}

/// Regime-switching drift: μ before liquidation, impacted drift afterwards.
///
/// A liquidation at or beyond the horizon never switches the regime.
pub fn drift_market<I: ImpactFunction>(
    t: f64,
    tau: Option<f64>,
    draw: &I,
    params: &MarketParams,
) -> Result<f64> {
    if !(0.0..=params.horizon).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", params.horizon)));
    }
    match tau {
        Some(u) if u < params.horizon && t >= u => drift_impacted(t, u, draw, params),
        _ => Ok(params.mu),
    }
}

/// Joint density of (Θ, K) on a rectangle.
#[derive(Clone)]
pub enum JointDensity {
    Uniform,
    /// Unnormalized-safe custom density together with an upper bound used by
    /// rejection sampling.
    Custom { pdf: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>, bound: f64 },
}

impl fmt::Debug for JointDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JointDensity::Uniform => write!(f, "Uniform"),
            JointDensity::Custom { bound, .. } => write!(f, "Custom {{ bound: {bound} }}"),
        }
    }
}

/// Law of the impact parameters.
#[derive(Debug, Clone)]
pub struct ImpactDistribution {
    pub theta_range: (f64, f64),
    pub k_range: (f64, f64),
    pub density: JointDensity,
}

impl ImpactDistribution {
    pub fn uniform(theta_lo: f64, theta_hi: f64, k_lo: f64, k_hi: f64) -> Result<Self> {
        let d = Self {
            theta_range: (theta_lo, theta_hi),
            k_range: (k_lo, k_hi),
            density: JointDensity::Uniform,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn point_mass(draw: ImpactDraw) -> Self {
        Self {
            theta_range: (draw.theta, draw.theta),
            k_range: (draw.k, draw.k),
            density: JointDensity::Uniform,
        }
    }

    pub fn custom<F>(theta_range: (f64, f64), k_range: (f64, f64), pdf: F, bound: f64) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        if theta_range.0 >= theta_range.1 || k_range.0 >= k_range.1 {
            return Err(invalid("custom densities need non-degenerate ranges"));
        }
        if !(bound > 0.0) {
            return Err(invalid("density bound must be > 0"));
        }
        let d = Self { theta_range, k_range, density: JointDensity::Custom { pdf: Arc::new(pdf), bound } };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (tl, th) = self.theta_range;
        let (kl, kh) = self.k_range;
        if !(tl > 0.0 && tl <= th && th.is_finite()) {
            return Err(invalid(format!("theta range [{tl}, {th}] invalid")));
        }
        if !(kl >= 0.0 && kl <= kh && kh < 1.0) {
            return Err(invalid(format!("k range [{kl}, {kh}] must satisfy 0 <= lo <= hi < 1")));
        }
        Ok(())
    }

    pub fn theta_degenerate(&self) -> bool {
        self.theta_range.0 == self.theta_range.1
    }

    pub fn k_degenerate(&self) -> bool {
        self.k_range.0 == self.k_range.1
    }

    /// Density value; zero outside the support. Degenerate directions are
    /// treated as Dirac masses and ignored here.
    pub fn pdf(&self, theta: f64, k: f64) -> f64 {
        let (tl, th) = self.theta_range;
        let (kl, kh) = self.k_range;
        if theta < tl || theta > th || k < kl || k > kh {
            return 0.0;
        }
        match &self.density {
            JointDensity::Uniform => {
                let wt = if self.theta_degenerate() { 1.0 } else { th - tl };
                let wk = if self.k_degenerate() { 1.0 } else { kh - kl };
                1.0 / (wt * wk)
            }
            JointDensity::Custom { pdf, .. } => pdf(theta, k),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ImpactDraw {
        let (tl, th) = self.theta_range;
        let (kl, kh) = self.k_range;
        let draw = |rng: &mut R| ImpactDraw {
            theta: tl + (th - tl) * rng.random::<f64>(),
            k: kl + (kh - kl) * rng.random::<f64>(),
        };
        match &self.density {
            JointDensity::Uniform => draw(rng),
            JointDensity::Custom { pdf, bound } => loop {
                let d = draw(rng);
                if rng.random::<f64>() * bound <= pdf(d.theta, d.k) {
                    break d;
                }
            },
        }
    }

    /// Midpoint of the support.
    pub fn center(&self) -> ImpactDraw {
        ImpactDraw {
            theta: 0.5 * (self.theta_range.0 + self.theta_range.1),
            k: 0.5 * (self.k_range.0 + self.k_range.1),
        }
    }
}

impl Default for ImpactDistribution {
    fn default() -> Self {
        Self {
            theta_range: (0.05, 0.15),
            k_range: (0.02, 0.08),
            density: JointDensity::Uniform,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(theta: f64, k: f64) -> ImpactDraw {
        ImpactDraw::new(theta, k).unwrap()
    }

    #[test]
    fn g_examples() {
        assert_eq!(impact_g(0.0, &d(0.3, 0.5)).unwrap(), 1.0);
        assert!((impact_g(0.1, &d(0.1, 0.1)).unwrap() - 0.9).abs() < 1e-15);
        let one_day = 1.0 - impact_g(1.0 / 250.0, &d(0.1, 0.1)).unwrap();
        assert!((one_day - 0.01).abs() < 1e-3, "{one_day}");
        assert!(impact_g(-1e-3, &d(0.1, 0.1)).is_err());
    }

    #[test]
    fn g_prime_at_zero_and_minimum() {
        let draw = d(0.1, 0.1);
        let gp0 = impact_g_prime(0.0, &draw).unwrap();
        assert!((gp0 + std::f64::consts::E).abs() < 1e-12);
        let h = 1e-7;
        let fd = (draw.value(h) - draw.value(0.0)) / h;
        assert!((fd - gp0).abs() < 1e-5);
        assert_eq!(impact_g_prime(0.1, &draw).unwrap(), 0.0);
        let t = 0.05;
        let h = 1e-6;
        let cd = (draw.value(t + h) - draw.value(t - h)) / (2.0 * h);
        assert!((cd - draw.derivative(t)).abs() < 1e-6);
    }

    #[test]
    fn g4_examples() {
        let d4 = ImpactDraw4::new(0.05, 0.1, 0.05, 0.05).unwrap();
        assert_eq!(impact_g4(0.0, &d4).unwrap(), 1.0);
        assert!((d4.left_branch(0.05) - d4.right_branch(0.05)).abs() < 1e-12);
        assert!((impact_g4(10.0, &d4).unwrap() - 0.95).abs() < 1e-6);
        assert!(ImpactDraw4::new(0.1, 0.1, 0.6, 0.4).is_err());
    }

    #[test]
    fn drift_examples() {
        let p = MarketParams::default();
        let draw = d(0.1, 0.05);
        let at_u = drift_impacted(0.3, 0.3, &draw, &p).unwrap();
        assert!((at_u - (0.07 - 0.5 * std::f64::consts::E)).abs() < 1e-12);
        assert!((drift_impacted(0.4, 0.3, &draw, &p).unwrap() - 0.07).abs() < 1e-15);
        assert!((drift_impacted(30.0, 0.0, &draw, &p).unwrap() - 0.07).abs() < 1e-6);
        assert!(drift_impacted(0.2, 0.3, &draw, &p).is_err());
        assert_eq!(drift_market(0.1, Some(0.3), &draw, &p).unwrap(), 0.07);
        assert_eq!(drift_market(0.3, Some(0.3), &draw, &p).unwrap(), at_u);
        assert_eq!(drift_market(0.9, None, &draw, &p).unwrap(), 0.07);
        assert_eq!(drift_market(1.0, Some(1.0), &draw, &p).unwrap(), 0.07);
        assert_eq!(draw.impacted_drift(0.0, 0.07), at_u);
    }

    #[test]
    fn construction_bounds() {
        assert!(ImpactDraw::new(0.1, 1.0).is_err());
        assert!(ImpactDraw::new(0.0, 0.5).is_err());
        assert!(ImpactDraw::new(0.1, 0.999).is_ok());
        assert!(MarketParams::new(0.07, 0.0, 80.0, 0.9, 1.0).is_err());
        assert!(MarketParams::new(0.07, 0.2, 80.0, 1.0, 1.0).is_err());
        assert!(ImpactDistribution::uniform(0.05, 0.15, 0.02, 1.0).is_err());
    }

    #[test]
    fn log_value_matches_value() {
        let draw = d(0.08, 0.07);
        for &t in &[0.0, 0.01, 0.08, 0.5] {
            assert!((draw.log_value(t) - draw.value(t).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_sampling_stays_in_support() {
        use rand::SeedableRng;
        let dist = ImpactDistribution::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = dist.sample(&mut rng);
            assert!(dist.pdf(s.theta, s.k) > 0.0);
        }
        assert!((dist.pdf(0.1, 0.05) - 1.0 / (0.1 * 0.06)).abs() < 1e-9);
    }
}
