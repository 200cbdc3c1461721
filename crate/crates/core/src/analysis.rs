//! Downstream logistic regression and Rubin's rules for synthetic data.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::schema::{Dataset, Schema};

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum VarianceMethod {
    ObservedInformation,
    Bootstrap { resamples: usize, seed: u64 },
}

/// Logistic regression of one binary variable on others, with an intercept
/// and level-0 reference dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticSpec {
    pub dependent: String,
    pub independents: Vec<String>,
    #[serde(default)]
    pub reg_lambda: f64,
    #[serde(default = "default_variance")]
    pub variance: VarianceMethod,
}

fn default_variance() -> VarianceMethod {
    VarianceMethod::ObservedInformation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub names: Vec<String>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub converged: bool,
}

struct Design {
    dependent: usize,
    independents: Vec<usize>,
    names: Vec<String>,
    /// First coefficient column of each independent variable.
    offsets: Vec<usize>,
}

impl Design {
    fn new(schema: &Schema, dependent: usize, independents: &[usize]) -> Result<Self> {
        if schema.cardinality(dependent) != 2 {
            return Err(Error::Config(format!(
                "dependent variable `{}` must be binary",
                schema.variables()[dependent].name
            )));
        }
        if independents.contains(&dependent) {
            return Err(Error::Config("dependent variable listed as independent".into()));
        }
        let mut names = vec!["intercept".to_string()];
        let mut offsets = Vec::new();
        for &j in independents {
            let var = &schema.variables()[j];
            offsets.push(names.len());
            if var.cardinality() == 2 {
                names.push(var.name.clone());
            } else {
                names.extend(var.levels[1..].iter().map(|l| format!("{}={l}", var.name)));
            }
        }
        Ok(Design {
            dependent,
            independents: independents.to_vec(),
            names,
            offsets,
        })
    }

    fn dim(&self) -> usize {
        self.names.len()
    }

    fn features(&self, row: &[u32]) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        x[0] = 1.0;
        for (&j, &o) in self.independents.iter().zip(&self.offsets) {
            if row[j] > 0 {
                x[o + row[j] as usize - 1] = 1.0;
            }
        }
        x
    }

    /// Rows grouped by covariate pattern: (features, trials, successes).
    fn aggregate<'a>(&self, rows: impl Iterator<Item = &'a [u32]>) -> Vec<(DVector<f64>, f64, f64)> {
        let mut groups: BTreeMap<Vec<u32>, (f64, f64)> = BTreeMap::new();
        let mut first: BTreeMap<Vec<u32>, Vec<u32>> = BTreeMap::new();
        for row in rows {
            let key: Vec<u32> = self.independents.iter().map(|&j| row[j]).collect();
            let e = groups.entry(key.clone()).or_insert((0.0, 0.0));
            e.0 += 1.0;
            e.1 += row[self.dependent] as f64;
            first.entry(key).or_insert_with(|| row.to_vec());
        }
        groups
            .into_iter()
            .map(|(k, (n, y))| (self.features(&first[&k]), n, y))
            .collect()
    }
}

struct Fit {
    beta: DVector<f64>,
    info: DMatrix<f64>,
    converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn penalised_loglik(groups: &[(DVector<f64>, f64, f64)], beta: &DVector<f64>, lambda: f64) -> f64 {
    groups
        .iter()
        .map(|(x, n, y)| {
            let eta = x.dot(beta);
            y * eta - n * log1p_exp(eta)
        })
        .sum::<f64>()
        - 0.5 * lambda * beta.norm_squared()
}

/// Newton iterations on the penalised log-likelihood. `info` is the
/// unpenalised Fisher information at the returned coefficients.
fn newton(groups: &[(DVector<f64>, f64, f64)], dim: usize, lambda: f64) -> Fit {
    let mut beta = DVector::zeros(dim);
    let mut ll = penalised_loglik(groups, &beta, lambda);
    let mut converged = false;
    let mut info = DMatrix::zeros(dim, dim);
    for _ in 0..100 {
        let mut score = -&beta * lambda;
        info.fill(0.0);
        for (x, n, y) in groups {
            let p = sigmoid(x.dot(&beta));
            score += x * (y - n * p);
            info.ger(n * p * (1.0 - p), x, x, 1.0);
        }
        let penalised = &info + DMatrix::identity(dim, dim) * lambda;
        let Some(step) = penalised.cholesky().map(|c| c.solve(&score)) else {
            break;
        };
        // under separation the score vanishes while the step does not
        if score.amax() < 1e-8 && step.amax() < 1e-6 {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let lc = penalised_loglik(groups, &cand, lambda);
            if lc >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = lc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    info.fill(0.0);
    let mut saturated = false;
    for (x, n, _) in groups {
        let p = sigmoid(x.dot(&beta));
        let w = p * (1.0 - p);
        saturated |= w < 1e-10;
        info.ger(n * w, x, x, 1.0);
    }
    let separated = lambda == 0.0 && (saturated || beta.amax() > 1e3);
    Fit {
        beta,
        info,
        converged: converged && !separated,
    }
}

/// Logistic regression of `dependent` on `independents` with an L2 penalty
/// `reg_lambda / 2 * |beta|^2`.
pub fn logistic_fit(
    data: &Dataset,
    dependent: usize,
    independents: &[usize],
    reg_lambda: f64,
    variance: VarianceMethod,
) -> Result<AnalysisResult> {
    if !(reg_lambda >= 0.0 && reg_lambda.is_finite()) {
        return Err(Error::Config(format!("regularisation must be non-negative, got {reg_lambda}")));
    }
    if data.n_rows() == 0 {
        return Err(Error::Config("cannot fit a regression on an empty dataset".into()));
    }
    let design = Design::new(data.schema(), dependent, independents)?;
    let dim = design.dim();
    let groups = design.aggregate(data.rows());
    let fit = newton(&groups, dim, reg_lambda);

    let v = match variance {
        VarianceMethod::ObservedInformation => {
            let penalised = &fit.info + DMatrix::identity(dim, dim) * reg_lambda;
            match penalised.cholesky() {
                Some(c) => c.inverse().diagonal().iter().copied().collect(),
                None => vec![f64::INFINITY; dim],
            }
        }
        VarianceMethod::Bootstrap { resamples, seed } => {
            if resamples < 2 {
                return Err(Error::Config("bootstrap needs at least two resamples".into()));
            }
            let mut rng = StageRng::seed_from_u64(seed);
            let n = data.n_rows();
            let mut estimates: Vec<DVector<f64>> = Vec::with_capacity(resamples);
            for _ in 0..resamples {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let g = design.aggregate(idx.iter().map(|&i| data.row(i)));
                estimates.push(newton(&g, dim, reg_lambda).beta);
            }
            (0..dim)
                .map(|j| {
                    let m = estimates.iter().map(|e| e[j]).sum::<f64>() / resamples as f64;
                    estimates.iter().map(|e| (e[j] - m).powi(2)).sum::<f64>() / (resamples as f64 - 1.0)
                })
                .collect()
        }
    };
    let converged = fit.converged && v.iter().all(|x: &f64| x.is_finite());
    Ok(AnalysisResult {
        names: design.names,
        q: fit.beta.iter().copied().collect(),
        v,
        converged,
    })
}

/// Logistic fit to a weighted list of rows, e.g. a whole population given
/// as cell probabilities. Returns coefficient names and estimates.
pub fn logistic_fit_weighted(
    schema: &Schema,
    dependent: usize,
    independents: &[usize],
    cells: &[(Vec<u32>, f64)],
) -> Result<(Vec<String>, Vec<f64>)> {
    let design = Design::new(schema, dependent, independents)?;
    let groups: Vec<(DVector<f64>, f64, f64)> = cells
        .iter()
        .map(|(row, w)| (design.features(row), *w, w * row[dependent] as f64))
        .collect();
    let fit = newton(&groups, design.dim(), 0.0);
    if !fit.converged {
        return Err(Error::Numeric("population logistic fit did not converge".into()));
    }
    Ok((design.names, fit.beta.iter().copied().collect()))
}

/// Resolves variable names and fits `spec`.
pub fn logistic_fit_spec(data: &Dataset, spec: &LogisticSpec) -> Result<AnalysisResult> {
    let schema = data.schema();
    let dep = schema
        .index_of(&spec.dependent)
        .ok_or_else(|| Error::Config(format!("unknown dependent variable `{}`", spec.dependent)))?;
    let ind = schema.resolve(&spec.independents)?;
    logistic_fit(data, dep, &ind, spec.reg_lambda, spec.variance)
}

/// Per-coefficient estimate lists, possibly of different lengths after
/// filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub names: Vec<String>,
    pub q: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub dropped_fraction: Vec<f64>,
}

impl Estimates {
    pub fn from_results(results: &[AnalysisResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Config("no analysis results to combine".into()))?;
        let k = first.q.len();
        if results.iter().any(|r| r.q.len() != k || r.v.len() != k) {
            return Err(Error::Config("analysis results differ in dimension".into()));
        }
        Ok(Estimates {
            names: first.names.clone(),
            q: (0..k).map(|j| results.iter().map(|r| r.q[j]).collect()).collect(),
            v: (0..k).map(|j| results.iter().map(|r| r.v[j]).collect()).collect(),
            dropped_fraction: vec![0.0; k],
        })
    }
}

/// Removes, per coefficient, the estimates whose variance is at least
/// `threshold` (non-finite variances included).
pub fn drop_outlier_variances(results: &[AnalysisResult], threshold: f64) -> Result<Estimates> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("variance threshold must be positive, got {threshold}")));
    }
    let all = Estimates::from_results(results)?;
    let mut out = all.clone();
    for j in 0..all.names.len() {
        let keep: Vec<usize> = (0..all.v[j].len()).filter(|&i| all.v[j][i] < threshold).collect();
        if keep.is_empty() {
            return Err(Error::AllDropped(all.names[j].clone()));
        }
        out.q[j] = keep.iter().map(|&i| all.q[j][i]).collect();
        out.v[j] = keep.iter().map(|&i| all.v[j][i]).collect();
        out.dropped_fraction[j] = 1.0 - keep.len() as f64 / all.v[j].len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedEstimate {
    pub names: Vec<String>,
    pub q_bar: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub b: Vec<f64>,
    pub t: Vec<f64>,
    pub t_star: Vec<f64>,
    pub r: Vec<f64>,
    /// Degrees of freedom; infinite when the between-dataset variance is 0.
    pub nu: Vec<f64>,
    pub m_used: Vec<usize>,
    pub dropped_fraction: Vec<f64>,
    pub n_syn: usize,
    pub n: usize,
}

/// Rubin's rules for one coefficient:
/// `(q_bar, v_bar, b, T, T*, r, nu)`.
pub fn combine_scalar(q: &[f64], v: &[f64], n_syn: usize, n: usize) -> Result<[f64; 7]> {
    let m = q.len();
    if m < 2 || v.len() != m {
        return Err(Error::Config(format!("Rubin's rules need at least two estimates, got {m}")));
    }
    if n == 0 {
        return Err(Error::Config("original data size must be positive".into()));
    }
    let mf = m as f64;
    let q_bar = q.iter().sum::<f64>() / mf;
    let v_bar = v.iter().sum::<f64>() / mf;
    let b = q.iter().map(|x| (x - q_bar).powi(2)).sum::<f64>() / (mf - 1.0);
    let t = (1.0 + 1.0 / mf) * b - v_bar;
    let t_star = if t >= 0.0 { t } else { n_syn as f64 / n as f64 * v_bar };
    if v_bar == 0.0 {
        return Err(Error::Numeric("mean variance estimate is zero; degrees of freedom undefined".into()));
    }
    let r = (1.0 + 1.0 / mf) * b / v_bar;
    let nu = if r == 0.0 { f64::INFINITY } else { (mf - 1.0) * (1.0 - 1.0 / r).powi(2) };
    Ok([q_bar, v_bar, b, t, t_star, r, nu])
}

pub fn combine_estimates(est: &Estimates, n_syn: usize, n: usize) -> Result<CombinedEstimate> {
    let k = est.names.len();
    let mut ce = CombinedEstimate {
        names: est.names.clone(),
        q_bar: Vec::with_capacity(k),
        v_bar: Vec::with_capacity(k),
        b: Vec::with_capacity(k),
        t: Vec::with_capacity(k),
        t_star: Vec::with_capacity(k),
        r: Vec::with_capacity(k),
        nu: Vec::with_capacity(k),
        m_used: Vec::with_capacity(k),
        dropped_fraction: est.dropped_fraction.clone(),
        n_syn,
        n,
    };
    for j in 0..k {
        let [q_bar, v_bar, b, t, t_star, r, nu] = combine_scalar(&est.q[j], &est.v[j], n_syn, n)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("coefficient `{}`: {msg}", est.names[j])),
                other => other,
            })?;
        ce.q_bar.push(q_bar);
        ce.v_bar.push(v_bar);
        ce.b.push(b);
        ce.t.push(t);
        ce.t_star.push(t_star);
        ce.r.push(r);
        ce.nu.push(nu);
        ce.m_used.push(est.q[j].len());
    }
    Ok(ce)
}

pub fn combine(results: &[AnalysisResult], n_syn: usize, n: usize) -> Result<CombinedEstimate> {
    combine_estimates(&Estimates::from_results(results)?, n_syn, n)
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("confidence level {level} outside (0, 1)")))
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

fn t_log_pdf(t: f64, nu: f64) -> f64 {
    ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - (nu + 1.0) / 2.0 * (t * t / nu).ln_1p()
}

/// `P(T > t)` for `t >= 0`.
fn t_upper_tail(t: f64, nu: f64) -> f64 {
    0.5 * beta_reg(nu / 2.0, 0.5, nu / (nu + t * t))
}

/// Quantile of Student's t with `nu > 0` (possibly fractional or infinite)
/// degrees of freedom.
pub fn t_quantile(nu: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability {p} outside (0, 1)")));
    }
    if !(nu > 0.0) {
        return Err(Error::Numeric(format!("degrees of freedom must be positive, got {nu}")));
    }
    if nu.is_infinite() || nu > 1e12 {
        return Ok(normal_quantile(p));
    }
    if p < 0.5 {
        return Ok(-t_quantile(nu, 1.0 - p)?);
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let alpha = 2.0 * (1.0 - p);
    // I_x(nu/2, 1/2) increases in x; bisect on ln x
    let (mut lo, mut hi) = (-745.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(nu / 2.0, 0.5, mid.exp()) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let x = (0.5 * (lo + hi)).exp();
    let mut t = (nu * (1.0 - x) / x).sqrt();
    let target = 1.0 - p;
    for _ in 0..20 {
        let delta = (t_upper_tail(t, nu) - target) / t_log_pdf(t, nu).exp();
        if !delta.is_finite() {
            break;
        }
        t += delta;
        if delta.abs() <= 1e-14 * t.abs() {
            break;
        }
    }
    Ok(t)
}

/// `q_bar -/+ t_{nu, (1 + level) / 2} sqrt(T*)` per coefficient.
pub fn interval(ce: &CombinedEstimate, level: f64) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    let p = 0.5 * (1.0 + level);
    ce.q_bar
        .iter()
        .zip(&ce.t_star)
        .zip(&ce.nu)
        .map(|((&q, &t), &nu)| {
            let half = if t == 0.0 { 0.0 } else { t_quantile(nu, p)? * t.sqrt() };
            Ok((q - half, q + half))
        })
        .collect()
}

/// Normal-theory interval from a single analysis.
pub fn naive_interval(result: &AnalysisResult, level: f64) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(result
        .q
        .iter()
        .zip(&result.v)
        .map(|(&q, &v)| (q - z * v.sqrt(), q + z * v.sqrt()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub q_bar: f64,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    pub nu: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub m_used: usize,
    pub dropped_fraction: f64,
}

/// One record per coefficient and level.
pub fn report(ce: &CombinedEstimate, levels: &[f64]) -> Result<Vec<CoefficientReport>> {
    let mut out = Vec::new();
    for &level in levels {
        let iv = interval(ce, level)?;
        for (j, (lo, hi)) in iv.into_iter().enumerate() {
            out.push(CoefficientReport {
                name: ce.names[j].clone(),
                q_bar: ce.q_bar[j],
                t_star: ce.t_star[j],
                nu: ce.nu[j],
                ci_lo: lo,
                ci_hi: hi,
                level,
                m_used: ce.m_used[j],
                dropped_fraction: ce.dropped_fraction[j],
            });
        }
    }
    Ok(out)
}
