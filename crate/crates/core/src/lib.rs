//! Differentially private synthetic tabular data from noisy marginal queries.
//!
//! The data holder releases Gaussian-noised marginal counts, fits a
//! noise-aware posterior over a maximum-entropy model of the data, and
//! publishes several synthetic datasets drawn from posterior samples. The
//! analyst fits a model on each and combines the results with Rubin's rules.

pub mod analysis;
pub mod error;
pub mod inference;
pub mod med;
pub mod pipeline;
pub mod privacy;
pub mod queries;
pub mod rng;
pub mod schema;

pub use error::{Error, Result};
