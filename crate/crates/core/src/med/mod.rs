//! The maximum-entropy distribution `P(x) = exp(theta' a(x) - theta0(theta))`
//! over a discrete domain, with marginal queries `a` as sufficient statistics.

mod elimination;
mod enumeration;
mod factor;
mod pgm;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queries::QueryCollection;
use crate::rng::StageRng;
use crate::schema::{Dataset, Schema, DEFAULT_ENUMERATION_CAP};

pub use elimination::DEFAULT_WIDTH_LIMIT;
pub use pgm::{fit_pgm_mle, PgmOptions};

use elimination::JunctionTreeEngine;
use enumeration::EnumerationEngine;

/// Mean and covariance of the query vector under a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Enumeration,
    JunctionTree,
}

impl Backend {
    /// Enumeration when the domain fits under `cap`, junction tree otherwise.
    pub fn auto(schema: &Schema, cap: u64) -> Backend {
        if schema.domain_size().fits(cap) {
            Backend::Enumeration
        } else {
            Backend::JunctionTree
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineLimits {
    pub enumeration_cap: u64,
    pub width_limit: usize,
}

impl Default for EngineLimits {
    fn default() -> Self {
        EngineLimits {
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            width_limit: DEFAULT_WIDTH_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Enumeration(EnumerationEngine),
    JunctionTree(JunctionTreeEngine),
}

/// Exact inference routines for one schema and query collection, evaluated
/// at any parameter vector.
#[derive(Debug, Clone)]
pub struct Engine {
    schema: Schema,
    n_queries: usize,
    backend: Backend,
    inner: Inner,
}

impl Engine {
    pub fn new(schema: &Schema, queries: &QueryCollection, backend: Backend) -> Result<Self> {
        Self::with_limits(schema, queries, backend, EngineLimits::default())
    }

    pub fn with_limits(schema: &Schema, queries: &QueryCollection, backend: Backend, limits: EngineLimits) -> Result<Self> {
        if queries.cardinalities() != schema.cardinalities().as_slice() {
            return Err(Error::Query("query collection was built for a different schema".into()));
        }
        let inner = match backend {
            Backend::Enumeration => Inner::Enumeration(EnumerationEngine::new(schema, queries, limits.enumeration_cap)?),
            Backend::JunctionTree => Inner::JunctionTree(JunctionTreeEngine::new(schema, queries, limits.width_limit)?),
        };
        Ok(Engine {
            schema: schema.clone(),
            n_queries: queries.len(),
            backend,
            inner,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Induced width of the elimination order (junction-tree backend only).
    pub fn induced_width(&self) -> Option<usize> {
        match &self.inner {
            Inner::Enumeration(_) => None,
            Inner::JunctionTree(e) => Some(e.induced_width()),
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_queries {
            return Err(Error::Numeric(format!(
                "parameter vector has length {}, expected {}",
                theta.len(),
                self.n_queries
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(match &self.inner {
            Inner::Enumeration(e) => e.log_partition(theta),
            Inner::JunctionTree(e) => e.log_partition(theta),
        })
    }

    pub fn moments(&self, theta: &[f64]) -> Result<MomentPair> {
        self.check(theta)?;
        Ok(match &self.inner {
            Inner::Enumeration(e) => e.moments(theta),
            Inner::JunctionTree(e) => e.moments(theta),
        })
    }

    /// `sum_ij m_ij k3_ijk` for the third cumulant `k3` of the query vector.
    pub fn third_cumulant_contraction(&self, theta: &[f64], mu: &DVector<f64>, m: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(theta)?;
        Ok(match &self.inner {
            Inner::Enumeration(e) => e.third_cumulant_contraction(theta, mu, m),
            Inner::JunctionTree(e) => e.third_cumulant_contraction(theta, mu, m),
        })
    }

    /// Joint marginal over `vars`, row-major in the given variable order.
    pub fn marginal(&self, theta: &[f64], vars: &[usize]) -> Result<Vec<f64>> {
        self.check(theta)?;
        if vars.is_empty() || vars.iter().any(|&v| v >= self.schema.len()) {
            return Err(Error::Query(format!("invalid marginal scope {vars:?}")));
        }
        let mut sorted = vars.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != vars.len() {
            return Err(Error::Query(format!("marginal scope {vars:?} repeats a variable")));
        }
        Ok(match &self.inner {
            Inner::Enumeration(e) => e.marginal(theta, vars),
            Inner::JunctionTree(e) => e.marginal(theta, vars),
        })
    }

    pub fn sample(&self, theta: &[f64], n_rows: usize, rng_seed: u64) -> Result<Dataset> {
        self.check(theta)?;
        let mut rng = StageRng::seed_from_u64(rng_seed);
        let codes = match &self.inner {
            Inner::Enumeration(e) => e.sample(theta, n_rows, &mut rng),
            Inner::JunctionTree(e) => e.sample(theta, n_rows, &mut rng),
        };
        Dataset::from_codes(self.schema.clone(), codes)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    schema_digest: String,
    queries: serde_json::Value,
    theta: Vec<f64>,
    backend: Backend,
}

/// A parametrised maximum-entropy distribution.
#[derive(Debug, Clone)]
pub struct MedModel {
    queries: QueryCollection,
    theta: Vec<f64>,
    engine: Arc<Engine>,
}

impl MedModel {
    pub fn new(schema: &Schema, queries: &QueryCollection, theta: Vec<f64>, backend: Backend) -> Result<Self> {
        let engine = Arc::new(Engine::new(schema, queries, backend)?);
        Self::from_engine(engine, queries.clone(), theta)
    }

    pub fn from_engine(engine: Arc<Engine>, queries: QueryCollection, theta: Vec<f64>) -> Result<Self> {
        if queries.len() != engine.n_queries() {
            return Err(Error::Query("engine and query collection differ in size".into()));
        }
        engine.check(&theta)?;
        Ok(MedModel { queries, theta, engine })
    }

    /// Same schema, queries and backend at another parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::from_engine(self.engine.clone(), self.queries.clone(), theta)
    }

    pub fn schema(&self) -> &Schema {
        self.engine.schema()
    }

    pub fn queries(&self) -> &QueryCollection {
        &self.queries
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn backend(&self) -> Backend {
        self.engine.backend()
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn induced_width(&self) -> Option<usize> {
        self.engine.induced_width()
    }

    pub fn log_partition(&self) -> f64 {
        self.engine.log_partition(&self.theta).expect("theta validated")
    }

    pub fn moments(&self) -> MomentPair {
        self.engine.moments(&self.theta).expect("theta validated")
    }

    pub fn marginal(&self, vars: &[usize]) -> Result<Vec<f64>> {
        self.engine.marginal(&self.theta, vars)
    }

    /// `ln P(x)` for one row.
    pub fn log_prob(&self, row: &[u32]) -> f64 {
        let score: f64 = self.queries.active(row).iter().map(|&q| self.theta[q]).sum();
        score - self.log_partition()
    }

    pub fn sample(&self, n_rows: usize, rng_seed: u64) -> Result<Dataset> {
        self.engine.sample(&self.theta, n_rows, rng_seed)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(StoredModel {
            schema_digest: self.schema().digest(),
            queries: self.queries.to_json(),
            theta: self.theta.clone(),
            backend: self.backend(),
        })
        .expect("model serialises")
    }

    pub fn from_json(schema: &Schema, value: serde_json::Value) -> Result<Self> {
        let stored: StoredModel = serde_json::from_value(value)?;
        let digest = schema.digest();
        if stored.schema_digest != digest {
            return Err(Error::FingerprintMismatch {
                expected: digest,
                found: stored.schema_digest,
            });
        }
        let queries = QueryCollection::from_json(schema, stored.queries)?;
        MedModel::new(schema, &queries, stored.theta, stored.backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queries::full_marginal_set;
    use crate::schema::toy_schema;
    use rand::Rng;

    fn toy_three_way() -> (Schema, QueryCollection) {
        let s = toy_schema();
        let q = full_marginal_set(&s, &[0, 1, 2]).unwrap().canonicalize(&s).unwrap();
        (s, q)
    }

    fn random_theta(k: usize, seed: u64) -> Vec<f64> {
        let mut rng = StageRng::seed_from_u64(seed);
        (0..k).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn uniform_log_partition() {
        let (s, q) = toy_three_way();
        for b in [Backend::Enumeration, Backend::JunctionTree] {
            let m = MedModel::new(&s, &q, vec![0.0; 7], b).unwrap();
            assert!((m.log_partition() - 8f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn huge_component_stays_finite() {
        let (s, q) = toy_three_way();
        let mut theta = vec![0.0; 7];
        theta[3] = 50.0;
        for b in [Backend::Enumeration, Backend::JunctionTree] {
            let m = MedModel::new(&s, &q, theta.clone(), b).unwrap();
            let z = m.log_partition();
            assert!(z.is_finite() && (z - 50.0).abs() < 1e-10);
        }
    }

    #[test]
    fn bernoulli_moments() {
        let s = toy_schema();
        let q = full_marginal_set(&s, &[1]).unwrap().canonicalize(&s).unwrap();
        let m = MedModel::new(&s, &q, vec![0.0], Backend::Enumeration).unwrap();
        let mp = m.moments();
        assert!((mp.mu[0] - 0.5).abs() < 1e-15);
        assert!((mp.sigma[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn normalisation_and_bernoulli_variance() {
        let (s, q) = toy_three_way();
        let m = MedModel::new(&s, &q, random_theta(7, 5), Backend::Enumeration).unwrap();
        let total: f64 = (0..8u32)
            .map(|c| m.log_prob(&[c >> 2 & 1, c >> 1 & 1, c & 1]).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-10);
        let mp = m.moments();
        for j in 0..7 {
            assert!((mp.sigma[(j, j)] - mp.mu[j] * (1.0 - mp.mu[j])).abs() < 1e-14);
            assert!((0.0..=1.0).contains(&mp.mu[j]));
        }
        let eig = mp.sigma.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-8));
    }

    #[test]
    fn finite_difference_gradient_and_hessian() {
        let (s, q) = toy_three_way();
        let engine = Engine::new(&s, &q, Backend::Enumeration).unwrap();
        let h = 1e-5;
        for seed in 0..50 {
            let theta = random_theta(7, 100 + seed);
            let mp = engine.moments(&theta).unwrap();
            for j in 0..7 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (engine.log_partition(&up).unwrap() - engine.log_partition(&dn).unwrap()) / (2.0 * h);
                assert!((fd - mp.mu[j]).abs() <= 1e-4 * mp.mu[j].abs().max(1e-3), "{fd} vs {}", mp.mu[j]);
            }
        }
        for seed in 0..10 {
            let theta = random_theta(7, 200 + seed);
            let mp = engine.moments(&theta).unwrap();
            for j in 0..7 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let mu_up = engine.moments(&up).unwrap().mu;
                let mu_dn = engine.moments(&dn).unwrap().mu;
                for i in 0..7 {
                    let fd = (mu_up[i] - mu_dn[i]) / (2.0 * h);
                    let exact = mp.sigma[(i, j)];
                    assert!((fd - exact).abs() <= 1e-3 * exact.abs().max(1e-2), "{fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn third_cumulant_matches_finite_differences() {
        let s = Schema::from_cardinalities(&["a", "b", "c", "d"], &[3, 2, 2, 2]).unwrap();
        let q = QueryCollection::from_full_sets(&s, &[vec![0, 1], vec![1, 2], vec![2, 3], vec![0, 3]])
            .unwrap()
            .canonicalize(&s)
            .unwrap();
        let k = q.len();
        let theta = random_theta(k, 9);
        let mut rng = StageRng::seed_from_u64(10);
        let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let m = &m + m.transpose();
        let h = 1e-5;
        for b in [Backend::Enumeration, Backend::JunctionTree] {
            let engine = Engine::new(&s, &q, b).unwrap();
            let mu = engine.moments(&theta).unwrap().mu;
            let got = engine.third_cumulant_contraction(&theta, &mu, &m).unwrap();
            for j in 0..k {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let su = engine.moments(&up).unwrap().sigma;
                let sd = engine.moments(&dn).unwrap().sigma;
                let fd = (su - sd).component_mul(&m).sum() / (2.0 * h);
                assert!((fd - got[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{b:?} {j}: {fd} vs {}", got[j]);
            }
        }
    }

    #[test]
    fn backends_agree() {
        let s = Schema::from_cardinalities(&["a", "b", "c", "d", "e"], &[3, 2, 2, 3, 2]).unwrap();
        let q = QueryCollection::from_full_sets(&s, &[vec![0, 1], vec![1, 2], vec![2, 3], vec![0, 3], vec![3, 4]])
            .unwrap()
            .canonicalize(&s)
            .unwrap();
        let en = Engine::new(&s, &q, Backend::Enumeration).unwrap();
        let jt = Engine::new(&s, &q, Backend::JunctionTree).unwrap();
        assert_eq!(jt.induced_width(), Some(2));
        let theta = random_theta(q.len(), 3);
        assert!((en.log_partition(&theta).unwrap() - jt.log_partition(&theta).unwrap()).abs() < 1e-10);
        let (a, b) = (en.moments(&theta).unwrap(), jt.moments(&theta).unwrap());
        assert!((a.mu - b.mu).amax() < 1e-12);
        assert!((a.sigma - b.sigma).amax() < 1e-12);
        for vars in [vec![3, 0], vec![4], vec![1, 2, 4]] {
            let x = en.marginal(&theta, &vars).unwrap();
            let y = jt.marginal(&theta, &vars).unwrap();
            assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn sampling_frequencies() {
        let (s, q) = toy_three_way();
        let n = 100_000;
        let mut freq = Vec::new();
        for b in [Backend::Enumeration, Backend::JunctionTree] {
            let m = MedModel::new(&s, &q, vec![0.0; 7], b).unwrap();
            let d = m.sample(n, 42).unwrap();
            assert_eq!(d.n_rows(), n);
            let mut counts = [0usize; 8];
            for r in d.rows() {
                counts[(r[0] * 4 + r[1] * 2 + r[2]) as usize] += 1;
            }
            let f: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            assert!(f.iter().all(|x| (x - 0.125).abs() < 0.01));
            freq.push(f);
            assert_eq!(m.sample(10, 1).unwrap(), m.sample(10, 1).unwrap());
            assert_eq!(m.sample(0, 1).unwrap().n_rows(), 0);
        }
        assert!(freq[0].iter().zip(&freq[1]).all(|(a, b)| (a - b).abs() < 0.01));
    }

    #[test]
    fn enumeration_refuses_large_domains() {
        let names: Vec<String> = (0..21).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let s = Schema::from_cardinalities(&refs, &[2; 21]).unwrap();
        let q = full_marginal_set(&s, &[0, 1]).unwrap().canonicalize(&s).unwrap();
        assert!(matches!(Engine::new(&s, &q, Backend::Enumeration), Err(Error::DomainTooLarge { .. })));
        assert_eq!(Backend::auto(&s, DEFAULT_ENUMERATION_CAP), Backend::JunctionTree);
        let jt = MedModel::new(&s, &q, vec![0.3; 3], Backend::JunctionTree).unwrap();
        assert!((jt.log_partition() - (19.0 * 2f64.ln() + (1.0 + 3.0 * 0.3f64.exp()).ln())).abs() < 1e-10);
    }

    #[test]
    fn json_round_trip() {
        let (s, q) = toy_three_way();
        let m = MedModel::new(&s, &q, random_theta(7, 1), Backend::JunctionTree).unwrap();
        let back = MedModel::from_json(&s, m.to_json()).unwrap();
        assert_eq!(back.theta(), m.theta());
        assert_eq!(back.backend(), Backend::JunctionTree);
        assert_eq!(back.queries(), m.queries());
        let other = Schema::from_cardinalities(&["a", "b", "c"], &[2, 2, 2]).unwrap();
        assert!(MedModel::from_json(&other, m.to_json()).is_err());
    }
}
