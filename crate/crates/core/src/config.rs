//! Flat key-value experiment configuration. Every default is the reference
//! parameter set, so an empty document reproduces the reference runs.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bsde_solver::{BasisKind, BsdeConfig, DriftSource, PostLiquidation, Ridge};
use crate::closed_form::PartialBudget;
use crate::error::{invalid, Result};
use crate::filtering::{DwqMode, ParticleCloud};
use crate::market_model::{ImpactDistribution, ImpactDraw, MarketParams};
use crate::path_engine::{RngSpec, Scheme, Simulator, TimeGrid};
use crate::quadrature::QuadratureSpec;
use crate::strategies::{InvestorKind, UtilitySpec, WealthScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityKind {
    #[default]
    Log,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudKind {
    /// Deterministic midpoint grid over the prior support.
    #[default]
    Grid,
    /// Independent draws from the prior.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mu: f64,
    pub sigma: f64,
    pub s0: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub x0: f64,
    pub p: f64,
    pub utility: UtilityKind,
    pub investors: Vec<InvestorKind>,
    pub seed: u64,
    pub stream_id: u64,
    pub scheme: Scheme,
    pub bridge_correction: bool,
    pub output_dir: String,
    pub informed_wealth: WealthScheme,
    pub uninformed_wealth: WealthScheme,
    pub filter_cloud: CloudKind,
    pub filter_per_axis: usize,
    pub filter_particles: usize,
    pub dwq_mode: DwqMode,
    pub bsde_paths: usize,
    pub bsde_basis: BasisKind,
    /// `None` selects the automatic ridge.
    pub bsde_ridge: Option<f64>,
    pub bsde_post_liquidation: PostLiquidation,
    pub scenario_theta: f64,
    pub scenario_k: f64,
    pub scenario_paths: usize,
    pub quad_rel_tol: f64,
    pub quad_abs_tol: f64,
    pub partial_outer_nodes: usize,
    pub partial_inner_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mu: 0.07,
            sigma: 0.2,
            s0: 80.0,
            alpha: 0.9,
            horizon: 1.0,
            steps: 250,
            n_paths: 100_000,
            theta_min: 0.05,
            theta_max: 0.15,
            k_min: 0.02,
            k_max: 0.08,
            x0: 80.0,
            p: 0.5,
            utility: UtilityKind::Log,
            investors: InvestorKind::ALL.to_vec(),
            seed: 20_240_601,
            stream_id: 0,
            scheme: Scheme::Euler,
            bridge_correction: false,
            output_dir: "out".into(),
            informed_wealth: WealthScheme::ExactExp,
            uninformed_wealth: WealthScheme::Euler,
            filter_cloud: CloudKind::Grid,
            filter_per_axis: 20,
            filter_particles: 10_000,
            dwq_mode: DwqMode::Observed,
            bsde_paths: 20_000,
            bsde_basis: BasisKind::Quadratic,
            bsde_ridge: None,
            bsde_post_liquidation: PostLiquidation::Explicit,
            scenario_theta: 0.1,
            scenario_k: 0.05,
            scenario_paths: 100,
            quad_rel_tol: 1e-6,
            quad_abs_tol: 1e-9,
            partial_outer_nodes: 24,
            partial_inner_samples: 400,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.market()?;
        self.grid()?;
        self.impact_dist()?;
        self.utility_spec(UtilityKind::Power).validate()?;
        self.bsde(DriftSource::FullyInformed)?;
        self.quad_spec().validate()?;
        if self.n_paths == 0 {
            return Err(invalid("n_paths must be >= 1"));
        }
        if !(self.x0 > 0.0) {
            return Err(invalid(format!("x0 must be > 0, got {}", self.x0)));
        }
        if self.investors.is_empty() {
            return Err(invalid("investor set is empty"));
        }
        if self.filter_per_axis == 0 || self.filter_particles == 0 {
            return Err(invalid("filter cloud must contain at least one atom"));
        }
        if self.bsde_paths == 0 || self.scenario_paths == 0 {
            return Err(invalid("bsde_paths and scenario_paths must be >= 1"));
        }
        if self.partial_outer_nodes == 0 || self.partial_inner_samples < 2 {
            return Err(invalid("partial budget needs nodes and >= 2 inner samples"));
        }
        ImpactDraw::new(self.scenario_theta, self.scenario_k)?;
        Ok(())
    }

    pub fn market(&self) -> Result<MarketParams> {
        MarketParams::new(self.mu, self.sigma, self.s0, self.alpha, self.horizon)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn grid_with(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, steps)
    }

    pub fn impact_dist(&self) -> Result<ImpactDistribution> {
        ImpactDistribution::uniform(self.theta_min, self.theta_max, self.k_min, self.k_max)
    }

    pub fn scenario_draw(&self) -> Result<ImpactDraw> {
        ImpactDraw::new(self.scenario_theta, self.scenario_k)
    }

    pub fn rng(&self) -> RngSpec {
        RngSpec::new(self.seed, self.stream_id)
    }

    pub fn utility_spec(&self, kind: UtilityKind) -> UtilitySpec {
        match kind {
            UtilityKind::Log => UtilitySpec::Log,
            UtilityKind::Power => UtilitySpec::Power { p: self.p },
        }
    }

    pub fn bsde(&self, source: DriftSource) -> Result<BsdeConfig> {
        let mut c = BsdeConfig::new(self.p, source)?;
        c.basis = self.bsde_basis;
        c.ridge = self.bsde_ridge.map_or(Ridge::Auto, Ridge::Fixed);
        c.post_liquidation = self.bsde_post_liquidation;
        c.validate()?;
        Ok(c)
    }

    pub fn quad_spec(&self) -> QuadratureSpec {
        QuadratureSpec { rel_tol: self.quad_rel_tol, abs_tol: self.quad_abs_tol, ..QuadratureSpec::default() }
    }

    pub fn partial_budget(&self) -> PartialBudget {
        PartialBudget {
            outer_nodes: self.partial_outer_nodes,
            inner_samples: self.partial_inner_samples,
            cloud_per_axis: self.filter_per_axis,
            dt: self.horizon / self.steps as f64,
            dwq_mode: self.dwq_mode,
            rng: self.rng().substream(1),
        }
    }

    pub fn cloud(&self, dist: &ImpactDistribution) -> Result<ParticleCloud> {
        match self.filter_cloud {
            CloudKind::Grid => ParticleCloud::grid(dist, self.filter_per_axis),
            CloudKind::Random => ParticleCloud::sample(dist, self.filter_particles, self.rng().substream(2)),
        }
    }

    /// Simulator over the configured prior.
    pub fn simulator(&self) -> Result<Simulator> {
        self.simulator_with(self.grid()?, self.impact_dist()?, self.rng())
    }

    pub fn simulator_with(&self, grid: TimeGrid, dist: ImpactDistribution, rng: RngSpec) -> Result<Simulator> {
        Ok(Simulator::new(grid, self.market()?, dist, rng, self.scheme)?.with_bridge_correction(self.bridge_correction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_reference_set() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.market().unwrap(), MarketParams::default());
        assert_eq!((c.steps, c.n_paths, c.x0, c.p), (250, 100_000, 80.0, 0.5));
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.bsde_ridge = Some(1e-9);
        c.scheme = Scheme::ExactLog;
        c.investors = vec![InvestorKind::FullyInformed];
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"mu_typo": 1}"#).unwrap_err().is_config_error());
        assert!(ExperimentConfig::from_json(r#"{"n_paths": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"alpha": 1.5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"p": 1.0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scheme": "milstein"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"scheme": "exact-log"}"#).is_ok());
    }
}
