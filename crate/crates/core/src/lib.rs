//! Stretched polymers in a random potential.
//!
//! Nearest-neighbour paths from the origin to the hyperplane at height `N`
//! carry the weight `exp(-λ|γ| - β Σ V(γ(l)))`. This crate computes quenched
//! and annealed partition functions, the cone-point renewal tables behind
//! them, and the synchronised walks used to compare the two.

pub mod error;
pub mod rng;
mod serde_util;
pub mod lattice;
pub mod environment;
pub mod pathsum;
pub mod annealed;
pub mod quenched_limits;
pub mod effective_walks;

pub use error::{Error, Result};
