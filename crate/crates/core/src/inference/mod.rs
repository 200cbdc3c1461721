//! Noise-aware posterior over the model parameters given a noisy release.
//!
//! The released counts are modelled as `s ~ N(n mu(theta), n Sigma(theta) +
//! sigma^2 I)`, the normal approximation of the sum of `n` rows drawn from
//! the model plus the mechanism's Gaussian noise, with an isotropic normal
//! prior on `theta`.

mod diagnostics;
mod laplace;
pub mod lbfgs;
mod nuts;

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::med::{Backend, Engine};
use crate::privacy::NoisyRelease;
use crate::queries::QueryCollection;
use crate::schema::Schema;

pub use diagnostics::{bulk_ess, split_rhat};
pub use laplace::{laplace_fit, LaplaceApprox, LaplaceOptions};
pub use nuts::{nuts, nuts_sample, ChainStats, LogDensity, NutsConfig, PosteriorSamples};

pub const DEFAULT_PRIOR_STD: f64 = 10.0;

/// Cholesky factor of a symmetric matrix, adding `10^-8 .. 10^-4` times the
/// mean diagonal when plain factorisation fails.
pub(crate) fn jittered_cholesky(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    let scale = a.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-8;
    while jitter <= 1e-4 * (1.0 + 1e-9) {
        let shifted = a + DMatrix::identity(a.nrows(), a.ncols()) * (jitter * scale);
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter * scale));
        }
        jitter *= 10.0;
    }
    let min_eigenvalue = a.clone().symmetric_eigenvalues().min();
    Err(Error::NotPositiveDefinite { min_eigenvalue })
}

#[derive(Debug, Clone)]
pub struct NoiseAwarePosterior {
    engine: Arc<Engine>,
    queries: QueryCollection,
    s_tilde: DVector<f64>,
    sigma_dp: f64,
    n: f64,
    prior_std: f64,
}

impl NoiseAwarePosterior {
    pub fn new(schema: &Schema, queries: &QueryCollection, release: &NoisyRelease, n: usize, backend: Backend) -> Result<Self> {
        let engine = Arc::new(Engine::new(schema, queries, backend)?);
        Self::with_engine(engine, queries, release, n)
    }

    pub fn with_engine(engine: Arc<Engine>, queries: &QueryCollection, release: &NoisyRelease, n: usize) -> Result<Self> {
        release.check_queries(queries)?;
        if !(release.sigma_dp > 0.0) {
            return Err(Error::Privacy(format!("noise scale must be positive, got {}", release.sigma_dp)));
        }
        if n == 0 {
            return Err(Error::Config("data size must be positive".into()));
        }
        Ok(NoiseAwarePosterior {
            engine,
            queries: queries.clone(),
            s_tilde: DVector::from_column_slice(&release.s_tilde),
            sigma_dp: release.sigma_dp,
            n: n as f64,
            prior_std: DEFAULT_PRIOR_STD,
        })
    }

    pub fn with_prior_std(mut self, prior_std: f64) -> Result<Self> {
        if !(prior_std > 0.0 && prior_std.is_finite()) {
            return Err(Error::Config(format!("prior standard deviation must be positive, got {prior_std}")));
        }
        self.prior_std = prior_std;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.queries.len()
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn queries(&self) -> &QueryCollection {
        &self.queries
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    fn covariance(&self, sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let k = self.dim();
        let c = sigma * self.n + DMatrix::identity(k, k) * self.sigma_dp.powi(2);
        Ok(jittered_cholesky(&c)?.0)
    }

    fn prior_term(&self, theta: &[f64]) -> f64 {
        -0.5 * theta.iter().map(|t| t * t).sum::<f64>() / self.prior_std.powi(2)
    }

    /// Unnormalised log posterior density.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let mp = self.engine.moments(theta)?;
        let r = &self.s_tilde - &mp.mu * self.n;
        let chol = self.covariance(&mp.sigma)?;
        let w = chol.solve(&r);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(-0.5 * r.dot(&w) - 0.5 * logdet + self.prior_term(theta))
    }

    /// Log density and its gradient.
    pub fn log_density_and_grad(&self, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let mp = self.engine.moments(theta)?;
        let r = &self.s_tilde - &mp.mu * self.n;
        let chol = self.covariance(&mp.sigma)?;
        let w = chol.solve(&r);
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let value = -0.5 * r.dot(&w) - 0.5 * logdet + self.prior_term(theta);

        let m = &w * w.transpose() - chol.inverse();
        let k3 = self.engine.third_cumulant_contraction(theta, &mp.mu, &m)?;
        let theta_v = DVector::from_column_slice(theta);
        let grad = &mp.sigma * &w * self.n + k3 * (0.5 * self.n) - theta_v / self.prior_std.powi(2);
        Ok((value, grad))
    }
}

impl LogDensity for NoiseAwarePosterior {
    fn dim(&self) -> usize {
        NoiseAwarePosterior::dim(self)
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        NoiseAwarePosterior::log_density_and_grad(self, x.as_slice())
    }
}
