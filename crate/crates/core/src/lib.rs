//! Multilevel Monte Carlo estimation of the probability that a large option
//! portfolio's loss over a short risk horizon exceeds a threshold.

pub mod error;
pub mod experiments;
pub mod loss_estimators;
pub mod market_model;
pub mod mlmc;
pub mod portfolio;
pub mod pricing;
pub mod rng;
pub mod stats;
pub mod subsampling;

pub use error::{Result, RiskError};
