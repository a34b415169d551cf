//! Scenario predict-then-optimize for data-driven online inventory routing.
//!
//! The crate is organised along the pipeline:
//!
//! - [`model`]: instance, state, plan and cost accounting of the routing MDP.
//! - [`datagen`]: synthetic demand series and k-means instance construction.
//! - [`nn`]: a small reverse-mode neural network engine.
//! - [`forecast`]: quantile (MQRNN), LSTM and maximum-likelihood predictors and
//!   scenario sampling.
//! - [`milp`]: a dense simplex / branch-and-bound MILP solver.
//! - [`routing`]: TSP and CVRP heuristics.
//! - [`sirp`]: stochastic inventory routing models, the matheuristic and
//!   progressive hedging.
//! - [`sim`]: rolling-horizon policy evaluation and reporting.

pub mod datagen;
pub mod error;
pub mod forecast;
pub mod milp;
pub mod model;
pub mod nn;
pub mod routing;
pub mod sim;
pub mod sirp;

pub use error::{Error, Result};
pub use forecast::{QuantileForecast, ScenarioSet};
pub use model::{CostBreakdown, DistMatrix, Instance, Plan, State};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's deterministic RNG from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
