//! Gaussian mechanism: analytic calibration and noising.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::queries::QueryCollection;
use crate::rng::StageRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Privacy(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Privacy(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Noisy query answers plus what is needed to model the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyRelease {
    pub s_tilde: Vec<f64>,
    pub sigma_dp: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub query_fingerprint: String,
    pub seed: u64,
}

impl NoisyRelease {
    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.delta)
    }

    /// Checks that `sigma_dp` meets the recorded budget.
    pub fn verify(&self) -> Result<()> {
        let d = delta_of(self.epsilon, self.sigma_dp, self.sensitivity)?;
        if d > self.delta + 1e-12 {
            return Err(Error::Privacy(format!(
                "sigma {} gives delta {d:e} above the recorded {:e}",
                self.sigma_dp, self.delta
            )));
        }
        Ok(())
    }

    pub fn check_queries(&self, queries: &QueryCollection) -> Result<()> {
        let expected = queries.fingerprint();
        if expected != self.query_fingerprint || self.s_tilde.len() != queries.len() {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.query_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("release serialises")
    }
}

/// Standard normal CDF.
pub fn ndtr(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `ln Phi(z)`, accurate far into the lower tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z > 6.0 {
        (-0.5 * erfc(z / std::f64::consts::SQRT_2)).ln_1p()
    } else if z > -20.0 {
        ndtr(z).ln()
    } else {
        // Phi(z) = phi(x) / m(x) with x = -z and the Laplace continued fraction
        // m(x) = x + 1/(x + 2/(x + 3/(x + ...))).
        let x = -z;
        let mut tail = x;
        for k in (1..=60).rev() {
            tail = x + k as f64 / tail;
        }
        -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln() - tail.ln()
    }
}

/// Smallest `delta` for which the Gaussian mechanism with noise scale `sigma`
/// is `(epsilon, delta)`-DP at L2 sensitivity `sensitivity`.
pub fn delta_of(epsilon: f64, sigma: f64, sensitivity: f64) -> Result<f64> {
    if !(epsilon > 0.0 && sigma > 0.0 && sensitivity > 0.0) {
        return Err(Error::Privacy(format!(
            "delta_of needs positive arguments, got epsilon={epsilon}, sigma={sigma}, sensitivity={sensitivity}"
        )));
    }
    let ratio = sigma / sensitivity;
    let a = 0.5 / ratio - epsilon * ratio;
    let b = -0.5 / ratio - epsilon * ratio;
    let log_first = log_ndtr(a);
    let log_second = epsilon + log_ndtr(b);
    if log_second >= log_first {
        return Ok(0.0);
    }
    Ok(log_first.exp() * -(log_second - log_first).exp_m1())
}

/// Smallest noise scale meeting `budget`, by bisection on `ln sigma`.
pub fn calibrate_sigma(budget: PrivacyBudget, sensitivity: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::Privacy(format!("sensitivity must be positive, got {sensitivity}")));
    }
    let (eps, target) = (budget.epsilon(), budget.delta());
    let f = |s: f64| delta_of(eps, s, sensitivity);

    let mut lo = 1e-3 * sensitivity;
    let mut hi = 1e6 * sensitivity;
    for _ in 0..20 {
        if f(lo)? > target {
            break;
        }
        hi = lo;
        lo /= 10.0;
    }
    for _ in 0..20 {
        if f(hi)? <= target {
            break;
        }
        lo = hi;
        hi *= 10.0;
    }
    let (dlo, dhi) = (f(lo)?, f(hi)?);
    if !(dlo > target && dhi <= target) {
        return Err(Error::Bracket {
            lo,
            hi,
            delta_lo: dlo,
            delta_hi: dhi,
            target,
        });
    }
    while hi / lo - 1.0 > 1e-12 {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Adds iid `N(0, sigma^2)` noise to each count.
pub fn gaussian_mechanism(s: &[u64], sigma: f64, rng_seed: u64) -> Vec<f64> {
    let mut rng = StageRng::seed_from_u64(rng_seed);
    s.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v as f64 + sigma * z
        })
        .collect()
}

/// Calibrates the noise for `queries` and releases `s` under `budget`.
pub fn release(queries: &QueryCollection, s: &[u64], budget: PrivacyBudget, rng_seed: u64) -> Result<NoisyRelease> {
    if s.len() != queries.len() {
        return Err(Error::Query(format!("{} answers for {} queries", s.len(), queries.len())));
    }
    let sensitivity = queries.sensitivity()?;
    let sigma = calibrate_sigma(budget, sensitivity)?;
    Ok(NoisyRelease {
        s_tilde: gaussian_mechanism(s, sigma, rng_seed),
        sigma_dp: sigma,
        epsilon: budget.epsilon(),
        delta: budget.delta(),
        sensitivity,
        query_fingerprint: queries.fingerprint(),
        seed: rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_ndtr_is_continuous_across_branches() {
        for &z in &[-20.0f64, 6.0] {
            let l = log_ndtr(z - 1e-9);
            let r = log_ndtr(z + 1e-9);
            assert!((l - r).abs() < 1e-6 * l.abs().max(1e-12), "{z}: {l} vs {r}");
        }
        assert!(log_ndtr(-40.0).is_finite());
        assert!((log_ndtr(-40.0) - (-804.608_442_013_753_8)).abs() < 1e-9);
    }

    #[test]
    fn delta_matches_high_precision_values() {
        // 40-digit evaluations of the same bound
        let cases = [
            (1.0, 1.0, 1.0, 0.126_936_737_506_643_945_8),
            (0.5, 2.0, 1.0, 0.052_440_323_287_669_66),
            (100.0, 0.1, 1.0, 1.879_717_002_051_915_744e-7),
        ];
        for (eps, sigma, sens, want) in cases {
            let got = delta_of(eps, sigma, sens).unwrap();
            assert!((got - want).abs() <= 1e-12 * want, "{eps} {sigma}: {got} vs {want}");
        }
    }

    /// `Phi` by composite Simpson integration of the density from 0.
    fn phi_quadrature(z: f64) -> f64 {
        let steps = 20_000;
        let h = z / steps as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(z);
        for i in 1..steps {
            acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn delta_matches_quadrature() {
        for &(eps, sigma, sens) in &[(0.3, 1.5, 1.0), (1.0, 0.8, 2f64.sqrt()), (2.0, 1.0, 6f64.sqrt()), (0.1, 5.0, 1.0)] {
            let r = sigma / sens;
            let want = phi_quadrature(0.5 / r - eps * r) - f64::exp(eps) * phi_quadrature(-0.5 / r - eps * r);
            let got = delta_of(eps, sigma, sens).unwrap();
            assert!((got - want).abs() <= 1e-9 * want, "{got} vs {want}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn calibration_round_trip(eps in 0.05f64..20.0, log_delta in -12.0f64..-2.0, sens in 0.1f64..10.0, c in 0.2f64..5.0) {
            let delta = 10f64.powf(log_delta);
            let budget = PrivacyBudget::new(eps, delta).unwrap();
            let sigma = calibrate_sigma(budget, sens).unwrap();
            let d = delta_of(eps, sigma, sens).unwrap();
            proptest::prop_assert!(d <= delta && d >= delta - 1e-12);
            let scaled = calibrate_sigma(budget, c * sens).unwrap();
            proptest::prop_assert!((scaled - c * sigma).abs() <= 1e-10 * c * sigma);
        }
    }

    #[test]
    fn delta_rejects_bad_arguments() {
        assert!(delta_of(0.0, 1.0, 1.0).is_err());
        assert!(delta_of(1.0, -1.0, 1.0).is_err());
        assert!(delta_of(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn delta_vanishes_for_huge_noise() {
        assert!(delta_of(1.0, 1e6, 1.0).unwrap() < 1e-10);
    }

    #[test]
    fn delta_decreases_in_sigma() {
        let d: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&s| delta_of(1.0, s, 1.0).unwrap()).collect();
        assert!(d[0] > d[1] && d[1] > d[2]);
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 1e-6).is_ok());
    }

    #[test]
    fn calibration_meets_budget() {
        let b = PrivacyBudget::new(0.5, 2.5e-7).unwrap();
        let s = calibrate_sigma(b, 2f64.sqrt()).unwrap();
        let d = delta_of(0.5, s, 2f64.sqrt()).unwrap();
        assert!(d <= 2.5e-7 && d >= 2.5e-7 - 1e-12);
        let tight = calibrate_sigma(PrivacyBudget::new(0.1, 2.5e-7).unwrap(), 2f64.sqrt()).unwrap();
        let loose = calibrate_sigma(PrivacyBudget::new(100.0, 2.5e-7).unwrap(), 2f64.sqrt()).unwrap();
        assert!(loose < s && s < tight);
    }

    #[test]
    fn mechanism_noise() {
        let exact = gaussian_mechanism(&[5, 3], 1e-12, 1);
        assert!((exact[0] - 5.0).abs() < 1e-9 && (exact[1] - 3.0).abs() < 1e-9);
        assert_eq!(gaussian_mechanism(&[1, 2, 3], 2.0, 4), gaussian_mechanism(&[1, 2, 3], 2.0, 4));

        let draws = gaussian_mechanism(&vec![0; 100_000], 2.0, 11);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((3.9..=4.1).contains(&var), "{var}");
    }

    #[test]
    fn release_records_metadata() {
        let s = crate::schema::toy_schema();
        let q = crate::queries::full_marginal_set(&s, &[0, 1, 2]).unwrap().canonicalize(&s).unwrap();
        let r = release(&q, &[1; 7], PrivacyBudget::new(1.0, 1e-6).unwrap(), 3).unwrap();
        assert_eq!(r.s_tilde.len(), 7);
        r.verify().unwrap();
        r.check_queries(&q).unwrap();
        let json = r.to_json_string();
        let back: NoisyRelease = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
