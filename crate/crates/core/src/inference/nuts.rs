//! No-U-Turn sampler with multinomial trajectory sampling, the generalised
//! U-turn criterion and dual-averaging step-size adaptation.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{bulk_ess, split_rhat};
use super::laplace::LaplaceApprox;
use super::NoiseAwarePosterior;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, StageRng};

/// A differentiable log density on `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NutsConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    /// Chains start uniformly in `[-init_radius, init_radius]^dim`.
    pub init_radius: f64,
    pub max_delta_h: f64,
    pub rhat_threshold: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        NutsConfig {
            chains: 4,
            warmup: 800,
            samples: 2000,
            max_depth: 12,
            target_accept: 0.8,
            init_radius: 2.0,
            max_delta_h: 1000.0,
            rhat_threshold: 1.05,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.max_depth == 0 {
            return Err(Error::Config("NUTS needs at least one chain, one draw and depth 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target acceptance {} outside (0, 1)", self.target_accept)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub divergences: usize,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
    pub leapfrog_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    /// One row per kept draw, chains concatenated in order.
    pub draws: Vec<Vec<f64>>,
    pub chain_ids: Vec<usize>,
    pub r_hat: Vec<f64>,
    pub ess: Vec<f64>,
    pub divergences: usize,
    pub chains: Vec<ChainStats>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    r_hat: &'a [f64],
    ess: &'a [f64],
    divergences: usize,
    chains: &'a [ChainStats],
    warnings: &'a [String],
}

impl PosteriorSamples {
    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// True when every R-hat is at most `threshold`.
    pub fn converged(&self, threshold: f64) -> bool {
        self.r_hat.iter().all(|&r| r <= threshold)
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.draws.len() as f64;
        (0..self.dim())
            .map(|j| self.draws.iter().map(|d| d[j]).sum::<f64>() / n)
            .collect()
    }

    /// `m` draws evenly spaced through the pooled chains.
    pub fn thin(&self, m: usize) -> Vec<Vec<f64>> {
        let total = self.draws.len();
        (0..m).map(|i| self.draws[i * total / m].clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain".to_string()];
        header.extend((0..self.dim()).map(|j| format!("theta_{j}")));
        w.write_record(&header)?;
        for (d, c) in self.draws.iter().zip(&self.chain_ids) {
            let mut rec = vec![c.to_string()];
            rec.extend(d.iter().map(|x| format!("{x:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::to_value(Diagnostics {
            r_hat: &self.r_hat,
            ess: &self.ess,
            divergences: self.divergences,
            chains: &self.chains,
            warnings: &self.warnings,
        })
        .expect("diagnostics serialise")
    }

    pub fn write_diagnostics(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&self.diagnostics_json())?.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct State {
    x: DVector<f64>,
    p: DVector<f64>,
    logp: f64,
    grad: DVector<f64>,
}

struct Sampler<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    /// Lower Cholesky factor of the inverse mass matrix; identity when absent.
    metric: Option<&'a DMatrix<f64>>,
    step: f64,
    rng: StageRng,
    max_delta_h: f64,
    divergent: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn criterion(p_sharp_minus: &DVector<f64>, p_sharp_plus: &DVector<f64>, rho: &DVector<f64>) -> bool {
    p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0
}

impl<'a, T: LogDensity + ?Sized> Sampler<'a, T> {
    fn evaluate(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        match self.target.log_density_and_grad(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Ok((v, g)),
            Ok(_) => Ok((f64::NEG_INFINITY, DVector::zeros(x.len()))),
            Err(e) if e.is_numeric() => Ok((f64::NEG_INFINITY, DVector::zeros(x.len()))),
            Err(e) => Err(e),
        }
    }

    fn velocity(&self, p: &DVector<f64>) -> DVector<f64> {
        match self.metric {
            None => p.clone(),
            Some(l) => l * (l.transpose() * p),
        }
    }

    fn kinetic(&self, p: &DVector<f64>) -> f64 {
        match self.metric {
            None => 0.5 * p.norm_squared(),
            Some(l) => 0.5 * (l.transpose() * p).norm_squared(),
        }
    }

    fn hamiltonian(&self, z: &State) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn sample_momentum(&mut self, dim: usize) -> DVector<f64> {
        let xi = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut self.rng));
        match self.metric {
            None => xi,
            Some(l) => l.transpose().solve_upper_triangular(&xi).expect("metric factor is invertible"),
        }
    }

    fn leapfrog(&self, z: &mut State, eps: f64) -> Result<()> {
        z.p += &z.grad * (0.5 * eps);
        z.x += self.velocity(&z.p) * eps;
        let (logp, grad) = self.evaluate(&z.x)?;
        z.logp = logp;
        z.grad = grad;
        z.p += &z.grad * (0.5 * eps);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut State,
        z_propose: &mut State,
        p_sharp_beg: &mut DVector<f64>,
        p_sharp_end: &mut DVector<f64>,
        rho: &mut DVector<f64>,
        p_beg: &mut DVector<f64>,
        p_end: &mut DVector<f64>,
        h0: f64,
        sign: f64,
        n_leapfrog: &mut usize,
        log_sum_weight: &mut f64,
        sum_metro_prob: &mut f64,
    ) -> Result<bool> {
        if depth == 0 {
            self.leapfrog(z, sign * self.step)?;
            *n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > self.max_delta_h {
                self.divergent = true;
            }
            *log_sum_weight = log_add(*log_sum_weight, h0 - h);
            *sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *z_propose = z.clone();
            *p_sharp_beg = self.velocity(&z.p);
            *p_sharp_end = p_sharp_beg.clone();
            *rho += &z.p;
            *p_beg = z.p.clone();
            *p_end = z.p.clone();
            return Ok(!self.divergent);
        }
        let dim = z.x.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = DVector::zeros(dim);
        let mut p_sharp_init_end = DVector::zeros(dim);
        let mut rho_init = DVector::zeros(dim);
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_init,
            sum_metro_prob,
        )?;
        if !valid_init {
            return Ok(false);
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = DVector::zeros(dim);
        let mut p_sharp_final_beg = DVector::zeros(dim);
        let mut rho_final = DVector::zeros(dim);
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            n_leapfrog,
            &mut lsw_final,
            sum_metro_prob,
        )?;
        if !valid_final {
            return Ok(false);
        }

        let lsw_subtree = log_add(lsw_init, lsw_final);
        *log_sum_weight = log_add(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = &rho_init + &rho_final;
        *rho += &rho_subtree;
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = &rho_init + &p_final_beg;
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = &rho_final + &p_init_end;
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        Ok(persist)
    }

    /// One NUTS transition; returns the new state, acceptance statistic,
    /// tree depth and leapfrog count.
    fn transition(&mut self, start: &State, max_depth: usize) -> Result<(State, f64, usize, usize)> {
        self.divergent = false;
        let dim = start.x.len();
        let mut z = start.clone();
        z.p = self.sample_momentum(dim);
        let p_sharp = self.velocity(&z.p);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let h0 = self.hamiltonian(&z);
        let mut n_leapfrog = 0;
        let mut sum_metro_prob = 0.0;
        let mut depth = 0;

        while depth < max_depth {
            let mut rho_fwd = DVector::zeros(dim);
            let mut rho_bck = DVector::zeros(dim);
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                z = z_fwd.clone();
                rho_bck = rho.clone();
                p_bck_fwd = p_fwd_fwd.clone();
                p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
                let v = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro_prob,
                )?;
                z_fwd = z.clone();
                v
            } else {
                z = z_bck.clone();
                rho_fwd = rho.clone();
                p_fwd_bck = p_bck_bck.clone();
                p_sharp_fwd_bck = p_sharp_bck_bck.clone();
                let v = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut n_leapfrog,
                    &mut lsw_subtree,
                    &mut sum_metro_prob,
                )?;
                z_bck = z.clone();
                v
            };
            if !valid {
                break;
            }
            depth += 1;

            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_add(log_sum_weight, lsw_subtree);

            rho = &rho_bck + &rho_fwd;
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let rho_ext = &rho_bck + &p_fwd_bck;
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
            let rho_ext = &rho_fwd + &p_bck_fwd;
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        let accept = if n_leapfrog > 0 { sum_metro_prob / n_leapfrog as f64 } else { 0.0 };
        Ok((z_sample, accept, depth, n_leapfrog))
    }

    /// Doubles or halves the step until one leapfrog step's acceptance
    /// crosses 0.8.
    fn init_step_size(&mut self, start: &State) -> Result<()> {
        let dim = start.x.len();
        let mut z = start.clone();
        z.p = self.sample_momentum(dim);
        let h0 = self.hamiltonian(&z);
        self.leapfrog(&mut z, self.step)?;
        let delta_h = h0 - self.hamiltonian(&z);
        let direction = if delta_h > 0.8f64.ln() { 1.0 } else { -1.0 };
        for _ in 0..100 {
            let mut z = start.clone();
            z.p = self.sample_momentum(dim);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step)?;
            let delta_h = h0 - self.hamiltonian(&z);
            if direction > 0.0 && !(delta_h > 0.8f64.ln()) {
                break;
            }
            if direction < 0.0 && !(delta_h < 0.8f64.ln()) {
                break;
            }
            self.step = if direction > 0.0 { 2.0 * self.step } else { 0.5 * self.step };
            if self.step > 1e7 {
                return Err(Error::Numeric("step size diverged to infinity during initialisation".into()));
            }
            if self.step == 0.0 {
                return Err(Error::Numeric("step size collapsed to zero during initialisation".into()));
            }
        }
        Ok(())
    }
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    metric: Option<&DMatrix<f64>>,
    config: &NutsConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let dim = target.dim();
    let mut sampler = Sampler {
        target,
        metric,
        step: 1.0,
        rng: StageRng::seed_from_u64(seed),
        max_delta_h: config.max_delta_h,
        divergent: false,
    };

    let mut state = None;
    for _ in 0..100 {
        let x = DVector::from_fn(dim, |_, _| sampler.rng.random_range(-config.init_radius..=config.init_radius));
        let (logp, grad) = sampler.evaluate(&x)?;
        if logp.is_finite() {
            state = Some(State {
                p: DVector::zeros(dim),
                x,
                logp,
                grad,
            });
            break;
        }
    }
    let mut state = state.ok_or_else(|| Error::Numeric("no finite initial point in 100 attempts".into()))?;

    sampler.init_step_size(&state)?;
    let mut adapt = DualAveraging::new(sampler.step, config.target_accept);
    for _ in 0..config.warmup {
        let (next, accept, _, _) = sampler.transition(&state, config.max_depth)?;
        state = next;
        sampler.step = adapt.update(accept);
    }
    if config.warmup > 0 {
        sampler.step = adapt.final_step();
    }

    let mut draws = Vec::with_capacity(config.samples);
    let mut divergences = 0;
    let mut accept_sum = 0.0;
    let mut depth_sum = 0;
    let mut leapfrogs = 0;
    for _ in 0..config.samples {
        let (next, accept, depth, n) = sampler.transition(&state, config.max_depth)?;
        state = next;
        divergences += sampler.divergent as usize;
        accept_sum += accept;
        depth_sum += depth;
        leapfrogs += n;
        draws.push(state.x.iter().copied().collect());
    }
    let stats = ChainStats {
        step_size: sampler.step,
        divergences,
        mean_accept: accept_sum / config.samples as f64,
        mean_tree_depth: depth_sum as f64 / config.samples as f64,
        leapfrog_steps: leapfrogs,
    };
    Ok((draws, stats))
}

/// Runs independent chains on `target`. `metric` is the lower Cholesky
/// factor of the inverse mass matrix (identity when `None`).
pub fn nuts<T: LogDensity + ?Sized>(
    target: &T,
    metric: Option<&DMatrix<f64>>,
    config: &NutsConfig,
    rng_seed: u64,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let results: Vec<Result<(Vec<Vec<f64>>, ChainStats)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, metric, config, derive_seed(rng_seed, &[c as u64])))
        .collect();
    let mut per_chain = Vec::with_capacity(config.chains);
    let mut chains = Vec::with_capacity(config.chains);
    for r in results {
        let (d, s) = r?;
        per_chain.push(d);
        chains.push(s);
    }

    let dim = target.dim();
    let mut r_hat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for j in 0..dim {
        let series: Vec<Vec<f64>> = per_chain.iter().map(|c| c.iter().map(|d| d[j]).collect()).collect();
        r_hat.push(split_rhat(&series));
        ess.push(bulk_ess(&series));
    }
    let divergences: usize = chains.iter().map(|c| c.divergences).sum();
    let total = config.chains * config.samples;
    let mut warnings = Vec::new();
    if divergences as f64 > 0.01 * total as f64 {
        warnings.push(format!("{divergences} of {total} transitions diverged"));
    }
    if let Some((j, r)) = r_hat
        .iter()
        .enumerate()
        .find(|(_, r)| !(**r <= config.rhat_threshold))
    {
        warnings.push(format!("R-hat {r:.4} for parameter {j} exceeds {}", config.rhat_threshold));
    }

    let mut draws = Vec::with_capacity(total);
    let mut chain_ids = Vec::with_capacity(total);
    for (c, d) in per_chain.into_iter().enumerate() {
        chain_ids.extend(std::iter::repeat_n(c, d.len()));
        draws.extend(d);
    }
    Ok(PosteriorSamples {
        draws,
        chain_ids,
        r_hat,
        ess,
        divergences,
        chains,
        warnings,
    })
}

/// The posterior in coordinates `z` with `theta = mean + L z`.
struct Whitened<'a> {
    post: &'a NoiseAwarePosterior,
    mean: DVector<f64>,
    l: DMatrix<f64>,
}

impl LogDensity for Whitened<'_> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_and_grad(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let theta = &self.mean + &self.l * z;
        let (v, g) = self.post.log_density_and_grad(theta.as_slice())?;
        Ok((v, self.l.transpose() * g))
    }
}

/// NUTS on the posterior whitened by the Laplace approximation; draws are
/// mapped back to `theta`.
pub fn nuts_sample(
    post: &NoiseAwarePosterior,
    la: &LaplaceApprox,
    config: &NutsConfig,
    rng_seed: u64,
) -> Result<PosteriorSamples> {
    if la.dim() != post.dim() {
        return Err(Error::Config("Laplace approximation does not match the posterior".into()));
    }
    let target = Whitened {
        post,
        mean: la.mean_vector(),
        l: la.cholesky_factor()?,
    };
    let mut out = nuts(&target, None, config, rng_seed)?;
    for d in out.draws.iter_mut() {
        let theta = &target.mean + &target.l * DVector::from_column_slice(d);
        *d = theta.iter().copied().collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_posterior;
    use super::super::{laplace_fit, LaplaceOptions};
    use super::*;

    /// `N(mean, cov)` given the precision matrix.
    struct Gaussian {
        mean: DVector<f64>,
        precision: DMatrix<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density_and_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            let d = x - &self.mean;
            let g = -(&self.precision * &d);
            Ok((0.5 * d.dot(&g), g))
        }
    }

    fn correlated() -> Gaussian {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, 0.0, 1.2, 1.0, -0.3, 0.0, -0.3, 0.25]);
        Gaussian {
            mean: DVector::from_vec(vec![1.0, -2.0, 0.5]),
            precision: cov.try_inverse().unwrap(),
        }
    }

    #[test]
    fn recovers_gaussian_means() {
        let g = correlated();
        let config = NutsConfig {
            chains: 4,
            warmup: 500,
            samples: 1000,
            ..Default::default()
        };
        let out = nuts(&g, None, &config, 7).unwrap();
        assert!(out.converged(1.05), "{:?}", out.r_hat);
        let mean = out.mean();
        let cov = g.precision.clone().try_inverse().unwrap();
        for j in 0..3 {
            let se = (cov[(j, j)] / out.ess[j]).sqrt();
            assert!((mean[j] - g.mean[j]).abs() < 3.0 * se, "{j}: {} vs {} (se {se})", mean[j], g.mean[j]);
        }
        assert_eq!(out.draws.len(), 4000);
        assert_eq!(out.chain_ids[1000], 1);
    }

    #[test]
    fn standard_normal_variances() {
        let g = Gaussian {
            mean: DVector::zeros(2),
            precision: DMatrix::identity(2, 2),
        };
        let config = NutsConfig {
            chains: 4,
            warmup: 500,
            samples: 2000,
            ..Default::default()
        };
        let out = nuts(&g, None, &config, 3).unwrap();
        for j in 0..2 {
            let m = out.draws.iter().map(|d| d[j]).sum::<f64>() / 8000.0;
            let v = out.draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / 7999.0;
            assert!((v - 1.0).abs() < 0.05, "{j}: {v}");
        }
    }

    #[test]
    fn leapfrog_is_second_order() {
        let g = correlated();
        let mut sampler = Sampler {
            target: &g,
            metric: None,
            step: 0.0,
            rng: StageRng::seed_from_u64(1),
            max_delta_h: 1000.0,
            divergent: false,
        };
        for trial in 0..10 {
            let x = DVector::from_fn(3, |_, _| sampler.rng.random_range(-1.0..1.0));
            let p = sampler.sample_momentum(3);
            let (logp, grad) = g.log_density_and_grad(&x).unwrap();
            let start = State { x, p, logp, grad };
            let error = |eps: f64, steps: usize| {
                let mut z = start.clone();
                for _ in 0..steps {
                    sampler.leapfrog(&mut z, eps).unwrap();
                }
                (sampler.hamiltonian(&z) - sampler.hamiltonian(&start)).abs()
            };
            let coarse = error(0.1, 10);
            let fine = error(0.05, 20);
            let ratio = coarse / fine;
            assert!((2.5..=6.0).contains(&ratio), "trial {trial}: ratio {ratio}");
        }
    }

    #[test]
    fn dense_metric_matches_whitening() {
        let g = correlated();
        let cov = g.precision.clone().try_inverse().unwrap();
        let l = cov.clone().cholesky().unwrap().l();
        let config = NutsConfig {
            chains: 2,
            warmup: 300,
            samples: 1500,
            ..Default::default()
        };
        let dense = nuts(&g, Some(&l), &config, 11).unwrap();
        let plain = nuts(&g, None, &config, 12).unwrap();
        let (a, b) = (dense.mean(), plain.mean());
        for j in 0..3 {
            let se = (cov[(j, j)] / dense.ess[j] + cov[(j, j)] / plain.ess[j]).sqrt();
            assert!((a[j] - b[j]).abs() < 4.0 * se, "{j}: {} vs {}", a[j], b[j]);
        }
    }

    #[test]
    fn toy_posterior_diagnostics() {
        let post = toy_posterior(0.5, 21);
        let la = laplace_fit(&post, &LaplaceOptions::default(), 1).unwrap();
        let out = nuts_sample(&post, &la, &NutsConfig::default(), 5).unwrap();
        assert!(out.converged(1.05), "{:?}", out.r_hat);
        assert!(out.ess.iter().all(|&e| e >= 400.0), "{:?}", out.ess);
        assert_eq!(out.thin(10).len(), 10);
        assert_eq!(out.thin(4)[1], out.draws[2000]);
    }

    #[test]
    fn deterministic_given_seed() {
        let g = correlated();
        let config = NutsConfig {
            chains: 2,
            warmup: 50,
            samples: 50,
            ..Default::default()
        };
        assert_eq!(nuts(&g, None, &config, 4).unwrap(), nuts(&g, None, &config, 4).unwrap());
    }
}
