//! Personalised federated learning as marginal-likelihood maximisation.
//!
//! Clients share a fixed effect `φ` and draw personal random effects
//! `z_i ~ N(μ, σ²I)`. The server maximises `Σ_i log p(D_i|φ, μ, σ)` by
//! stochastic approximation: clients estimate the gradient with a few
//! unadjusted Langevin steps on their local posterior (Fisher identity),
//! compress the `φ`-part, and the server applies a projected ascent step over
//! whichever clients turned up.

pub mod baselines;
pub mod compression;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;

pub use error::{FedPopError, Result};
pub use model::{ClientDataset, GlobalParams, Targets};
