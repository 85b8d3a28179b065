//! Bayesian disease mapping with heavy-tailed latent effects.
//!
//! The crate fits BYM2, Leroux, Congdon and two scale-mixture BYM2 variants
//! (Gamma and log-CAR mixing) to areal counts on an adjacency graph, using a
//! native Hamiltonian Monte Carlo sampler, and flags areas whose latent
//! variance needs inflating (`kappa` upper credible bound below 1).

mod band;
pub mod car;
pub mod convergence;
pub mod diagnostics;
pub mod error;
pub mod fit;
pub mod graph;
pub mod io;
pub mod models;
pub mod sampler;
pub mod simgen;

pub use error::{Error, Result};
pub use graph::{AdjacencyGraph, SparsePrecision};
pub use models::{Model, ModelKind, ModelSpec, ObservedData, ParameterState};
pub use sampler::{hmc_run, PosteriorDraws, SamplerConfig, Target};
