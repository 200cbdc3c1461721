//! Point estimate of the parameters minimising the L2 distance between the
//! noisy counts and `n * mu(theta)`.

use std::sync::Arc;

use nalgebra::DVector;

use super::{Backend, Engine, MedModel};
use crate::error::{Error, Result};
use crate::privacy::NoisyRelease;
use crate::queries::QueryCollection;
use crate::schema::Schema;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgmOptions {
    pub max_iters: usize,
    /// Stop once an iteration improves the objective by less than
    /// `tolerance * (1 + objective)`.
    pub tolerance: f64,
}

impl Default for PgmOptions {
    fn default() -> Self {
        PgmOptions {
            max_iters: 5000,
            tolerance: 1e-8,
        }
    }
}

fn objective(engine: &Engine, s_tilde: &DVector<f64>, n: f64, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
    let mp = engine.moments(theta)?;
    let r = s_tilde - &mp.mu * n;
    let value = r.norm_squared();
    let grad = &mp.sigma * &r * (-2.0 * n);
    Ok((value, grad))
}

/// Gradient descent with Armijo backtracking from `theta = 0`.
pub fn fit_pgm_mle(
    release: &NoisyRelease,
    queries: &QueryCollection,
    schema: &Schema,
    n: usize,
    backend: Backend,
    options: PgmOptions,
) -> Result<MedModel> {
    release.check_queries(queries)?;
    let engine = Arc::new(Engine::new(schema, queries, backend)?);
    let s = DVector::from_column_slice(&release.s_tilde);
    let nf = n as f64;
    let k = queries.len();

    let mut theta = vec![0.0; k];
    let (mut f, mut g) = objective(&engine, &s, nf, &theta)?;
    // curvature of the objective is at most 2 n^2 max-eig(Sigma)^2 <= n^2 / 8
    let mut step = 1.0 / (nf * nf).max(1.0);
    for _ in 0..options.max_iters {
        let gnorm2 = g.norm_squared();
        if gnorm2 == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(g.iter()).map(|(t, d)| t - step * d).collect();
            let (fc, gc) = objective(&engine, &s, nf, &cand)?;
            if !fc.is_finite() {
                return Err(Error::Numeric("PGM objective diverged".into()));
            }
            if fc <= f - 1e-4 * step * gnorm2 {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let improvement = f - fc;
        theta = cand;
        f = fc;
        g = gc;
        step *= 2.0;
        if improvement < options.tolerance * (1.0 + f) {
            break;
        }
    }
    MedModel::from_engine(engine, queries.clone(), theta)
}
