//! Lag-policy toolkit for a two-slot buffer whose jobs arrive a random
//! delay after being called.
//!
//! The next job is called a deterministic lag after the waiting job enters
//! service, and each job earns a non-increasing reward of its sojourn time.
//! The crate simulates the policy, evaluates the long-run reward
//! analytically, checks sufficient conditions for the no-lag policy to be
//! optimal, benchmarks lags by grid search and learns the lag online with a
//! Gamma posterior.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common case.

pub mod analytics;
pub mod cli;
pub mod bayes;
pub mod conditions;
pub mod distributions;
pub mod error;
pub mod gridsearch;
pub mod output;
pub mod quadrature;
pub mod reward;
pub mod rng;
pub mod scenarios;
pub mod scalar;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Distribution = distributions::DistributionSpec<f64>;
pub type Distribution32 = distributions::DistributionSpec<f32>;
pub type Reward = reward::RewardSpec<f64>;
pub type Reward32 = reward::RewardSpec<f32>;
pub type Trajectory = simulator::Trajectory<f64>;
pub type Trajectory32 = simulator::Trajectory<f32>;
pub type Schedule = simulator::ParamSchedule<f64>;
