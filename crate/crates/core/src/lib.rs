//! Decentralized maximum-likelihood inference for low-rank Gaussian
//! predictive process models.
//!
//! Machines hold disjoint (or overlapping) slices of a spatial dataset and
//! talk only to graph neighbours. Each machine minimizes the negative ELBO
//! by block coordinate descent over the variational moments (μ, Σ), the
//! regression coefficients γ, the nugget precision δ and the Matérn
//! parameters (σ, β), replacing every global average with dynamic
//! multi-consensus accumulators.

pub mod covkernel;
pub mod dbcd;
pub mod error;
pub mod geo;
pub mod inference;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod par;

pub use error::{Error, Result};
