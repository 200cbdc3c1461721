//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when one iteration lowers the loss by less than this.
    pub tolerance: f64,
    /// An iteration raising the loss by more than this counts as divergence.
    pub divergence_jump: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 500,
            tolerance: 1e-5,
            divergence_jump: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: DVector<f64>,
    pub loss: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub status: Status,
}

/// Minimises `f`, which returns the loss and its gradient.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, options: &LbfgsOptions) -> Result<Outcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    let (mut loss, mut grad) = f(&x)?;
    let diverged = |x: DVector<f64>, loss: f64, grad: DVector<f64>, it: usize| Outcome {
        x,
        loss,
        grad,
        iterations: it,
        status: Status::Diverged,
    };
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok(diverged(x, loss, grad, 0));
    }
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();

    for it in 1..=options.max_iters {
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map_or(1.0 / grad.amax().max(1.0), |(s, y, _)| s.dot(y) / y.dot(y));
        let mut dir = q * gamma;
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&dir);
            dir += s * (a - b);
        }
        let mut dir = -dir;
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            history.clear();
            dir = -grad.clone() / grad.amax().max(1.0);
            slope = grad.dot(&dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &x + &dir * step;
            match f(&cand) {
                Ok((lc, gc)) if lc.is_finite() && gc.iter().all(|g| g.is_finite()) => {
                    if lc - loss > options.divergence_jump {
                        return Ok(diverged(cand, lc, gc, it));
                    }
                    if lc <= loss + 1e-4 * step * slope {
                        accepted = Some((cand, lc, gc));
                        break;
                    }
                }
                Ok(_) => {}
                Err(e) if e.is_numeric() => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((xn, ln, gn)) = accepted else {
            // no descent possible along this direction: at numerical precision
            return Ok(Outcome {
                x,
                loss,
                grad,
                iterations: it,
                status: Status::Converged,
            });
        };
        let s = &xn - &x;
        let y = &gn - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = loss - ln;
        x = xn;
        loss = ln;
        grad = gn;
        if improvement < options.tolerance {
            return Ok(Outcome {
                x,
                loss,
                grad,
                iterations: it,
                status: Status::Converged,
            });
        }
    }
    Ok(Outcome {
        x,
        loss,
        grad,
        iterations: options.max_iters,
        status: Status::MaxIters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let loss = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            Ok((loss, g))
        };
        let opts = LbfgsOptions {
            tolerance: 1e-14,
            max_iters: 1000,
            ..Default::default()
        };
        let out = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] - 1.0).abs() < 1e-4, "{}", out.x);
    }

    #[test]
    fn quadratic_in_few_steps() {
        let f = |x: &DVector<f64>| {
            let g = DVector::from_vec(vec![2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)]);
            Ok(((x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2), g))
        };
        let out = minimize(f, DVector::zeros(2), &LbfgsOptions::default()).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-3 && (out.x[1] + 1.0).abs() < 1e-3);
        assert!(out.iterations < 30);
    }

    #[test]
    fn reports_divergence() {
        let f = |x: &DVector<f64>| Ok((f64::NAN * x[0], DVector::zeros(1)));
        let out = minimize(f, DVector::zeros(1), &LbfgsOptions::default()).unwrap();
        assert_eq!(out.status, Status::Diverged);
    }
}
