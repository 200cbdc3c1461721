//! Gaussian approximation at the posterior mode.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions, Status};
use super::{jittered_cholesky, NoiseAwarePosterior};
use crate::error::{Error, Result};
use crate::rng::StageRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceOptions {
    pub lbfgs: LbfgsOptions,
    pub max_restarts: usize,
    pub init_std: f64,
    /// Newton refinement runs until the gradient max-norm drops below this.
    pub gradient_tolerance: f64,
    pub max_newton_steps: usize,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            lbfgs: LbfgsOptions::default(),
            max_restarts: 5,
            init_std: 0.1,
            gradient_tolerance: 1e-6,
            max_newton_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceApprox {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub restarts: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub jitter: f64,
}

impl LaplaceApprox {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| self.covariance[i][j])
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        Ok(jittered_cholesky(&self.covariance_matrix())?.0.l())
    }

    /// `m` independent draws from the approximation.
    pub fn sample(&self, m: usize, rng_seed: u64) -> Result<Vec<Vec<f64>>> {
        let l = self.cholesky_factor()?;
        let mean = self.mean_vector();
        let mut rng = StageRng::seed_from_u64(rng_seed);
        Ok((0..m)
            .map(|_| {
                let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
                (&mean + &l * z).iter().copied().collect()
            })
            .collect())
    }
}

/// Hessian of `-log p` by central differences of the exact gradient,
/// symmetrised.
pub(crate) fn negative_hessian(post: &NoiseAwarePosterior, theta: &[f64]) -> Result<DMatrix<f64>> {
    let k = theta.len();
    let mut h = DMatrix::zeros(k, k);
    for j in 0..k {
        let step = 1e-4 * (1.0 + theta[j].abs());
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[j] += step;
        dn[j] -= step;
        let gu = post.log_density_and_grad(&up)?.1;
        let gd = post.log_density_and_grad(&dn)?.1;
        h.set_column(j, &(-(gu - gd) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Damped Newton iterations on `-log p` until the gradient is small.
fn newton_refine(post: &NoiseAwarePosterior, theta: &mut Vec<f64>, options: &LaplaceOptions) -> Result<f64> {
    let (mut value, mut grad) = post.log_density_and_grad(theta)?;
    for _ in 0..options.max_newton_steps {
        if grad.amax() < options.gradient_tolerance {
            break;
        }
        let h = negative_hessian(post, theta)?;
        let Ok((chol, _)) = jittered_cholesky(&h) else { break };
        let dir = chol.solve(&grad);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            if let Ok((v, g)) = post.log_density_and_grad(&cand) {
                if v >= value - 1e-10 * value.abs() && g.amax() < grad.amax() {
                    *theta = cand;
                    value = v;
                    grad = g;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(grad.amax())
}

/// Posterior mode by L-BFGS from random starts, refined by Newton steps, and
/// the inverse negative Hessian there.
pub fn laplace_fit(post: &NoiseAwarePosterior, options: &LaplaceOptions, rng_seed: u64) -> Result<LaplaceApprox> {
    let k = post.dim();
    let mut rng = StageRng::seed_from_u64(rng_seed);
    let init = Normal::new(0.0, options.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let loss = |x: &DVector<f64>| post.log_density_and_grad(x.as_slice()).map(|(v, g)| (-v, -g));

    let mut restarts = 0;
    let outcome = loop {
        let x0 = DVector::from_fn(k, |_, _| init.sample(&mut rng));
        let out = minimize(loss, x0, &options.lbfgs)?;
        if out.status != Status::Diverged {
            break out;
        }
        if restarts == options.max_restarts {
            return Err(Error::Numeric(format!(
                "MAP optimisation diverged after {} restarts",
                options.max_restarts
            )));
        }
        restarts += 1;
    };

    let mut theta: Vec<f64> = outcome.x.iter().copied().collect();
    let gradient_norm = newton_refine(post, &mut theta, options)?;
    let h = negative_hessian(post, &theta)?;
    let (chol, jitter) = jittered_cholesky(&h)?;
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LaplaceApprox {
        mean: theta,
        covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        restarts,
        iterations: outcome.iterations,
        gradient_norm,
        jitter,
    })
}
