//! Simulation, filtering, BSDE and quadrature tools for a market in which a
//! large holder is forced to liquidate when the price falls through a barrier.

pub mod bsde_solver;
pub mod closed_form;
pub mod config;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod market_model;
pub mod mc_evaluator;
pub mod path_engine;
pub mod quadrature;
pub mod strategies;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use market_model::{ImpactDistribution, ImpactDraw, ImpactDraw4, ImpactFunction, MarketParams};
pub use mc_evaluator::Estimate;
pub use path_engine::{RngSpec, Scheme, SimulatedPath, Simulator, TimeGrid};
pub use strategies::{InvestorKind, UtilitySpec, WealthScheme};
