//! Exact computations by summing over every cell of the domain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::factor::log_sum_exp;
use super::MomentPair;
use crate::error::{Error, Result};
use crate::queries::QueryCollection;
use crate::schema::Schema;

#[derive(Debug, Clone)]
pub(crate) struct EnumerationEngine {
    cards: Vec<usize>,
    n_queries: usize,
    /// `offsets[c]..offsets[c + 1]` indexes the active queries of cell `c`.
    offsets: Vec<usize>,
    active: Vec<usize>,
}

impl EnumerationEngine {
    pub fn new(schema: &Schema, queries: &QueryCollection, cap: u64) -> Result<Self> {
        let size = schema.domain_size();
        if !size.fits(cap) {
            return Err(Error::DomainTooLarge {
                cells: size.to_string(),
                cap,
            });
        }
        let cards = schema.cardinalities();
        let n_cells: usize = cards.iter().product();
        let mut offsets = Vec::with_capacity(n_cells + 1);
        let mut active = Vec::new();
        let mut row = vec![0u32; cards.len()];
        offsets.push(0);
        for c in 0..n_cells {
            decode_cell(c, &cards, &mut row);
            active.extend(queries.active(&row));
            offsets.push(active.len());
        }
        Ok(EnumerationEngine {
            cards,
            n_queries: queries.len(),
            offsets,
            active,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    fn cell_active(&self, c: usize) -> &[usize] {
        &self.active[self.offsets[c]..self.offsets[c + 1]]
    }

    fn log_weights(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_cells())
            .map(|c| self.cell_active(c).iter().map(|&q| theta[q]).sum())
            .collect()
    }

    pub fn log_partition(&self, theta: &[f64]) -> f64 {
        log_sum_exp(self.log_weights(theta))
    }

    /// Cell probabilities in lexicographic cell order.
    pub fn probabilities(&self, theta: &[f64]) -> Vec<f64> {
        let w = self.log_weights(theta);
        let z = log_sum_exp(w.iter().copied());
        w.into_iter().map(|x| (x - z).exp()).collect()
    }

    pub fn moments(&self, theta: &[f64]) -> MomentPair {
        let p = self.probabilities(theta);
        let k = self.n_queries;
        let mut mu = DVector::zeros(k);
        let mut second = DMatrix::<f64>::zeros(k, k);
        for (c, &pc) in p.iter().enumerate() {
            let act = self.cell_active(c);
            for (i, &a) in act.iter().enumerate() {
                mu[a] += pc;
                for &b in &act[..i] {
                    second[(a, b)] += pc;
                }
            }
        }
        let mut sigma = DMatrix::zeros(k, k);
        for a in 0..k {
            sigma[(a, a)] = mu[a] - mu[a] * mu[a];
            for b in 0..a {
                let v = second[(a, b)] + second[(b, a)] - mu[a] * mu[b];
                sigma[(a, b)] = v;
                sigma[(b, a)] = v;
            }
        }
        MomentPair { mu, sigma }
    }

    /// `out_k = sum_ij m_ij E[(a_i - mu_i)(a_j - mu_j)(a_k - mu_k)]`.
    pub fn third_cumulant_contraction(&self, theta: &[f64], mu: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
        let p = self.probabilities(theta);
        let m_mu = m * mu;
        let mu_m_mu = mu.dot(&m_mu);
        let mut out = DVector::zeros(self.n_queries);
        let mut total = 0.0;
        for (c, &pc) in p.iter().enumerate() {
            let act = self.cell_active(c);
            // (e_A - mu)' M (e_A - mu) for the active set A
            let mut f = mu_m_mu;
            for &i in act {
                f -= 2.0 * m_mu[i];
                for &j in act {
                    f += m[(i, j)];
                }
            }
            let w = pc * f;
            total += w;
            for &i in act {
                out[i] += w;
            }
        }
        out - mu * total
    }

    pub fn marginal(&self, theta: &[f64], vars: &[usize]) -> Vec<f64> {
        let p = self.probabilities(theta);
        let sub_cards: Vec<usize> = vars.iter().map(|&v| self.cards[v]).collect();
        let mut out = vec![0.0; sub_cards.iter().product()];
        let mut row = vec![0u32; self.cards.len()];
        for (c, &pc) in p.iter().enumerate() {
            decode_cell(c, &self.cards, &mut row);
            let idx = vars
                .iter()
                .zip(&sub_cards)
                .fold(0, |acc, (&v, &k)| acc * k + row[v] as usize);
            out[idx] += pc;
        }
        out
    }

    pub fn sample<R: Rng>(&self, theta: &[f64], n_rows: usize, rng: &mut R) -> Vec<u32> {
        let p = self.probabilities(theta);
        let mut cumulative = Vec::with_capacity(p.len());
        let mut acc = 0.0;
        for &x in &p {
            acc += x;
            cumulative.push(acc);
        }
        let total = acc;
        let d = self.cards.len();
        let mut codes = vec![0u32; n_rows * d];
        for r in 0..n_rows {
            let u: f64 = rng.random::<f64>() * total;
            let c = cumulative.partition_point(|&x| x <= u).min(p.len() - 1);
            decode_cell(c, &self.cards, &mut codes[r * d..(r + 1) * d]);
        }
        codes
    }
}

pub(crate) fn decode_cell(mut c: usize, cards: &[usize], out: &mut [u32]) {
    for (slot, &k) in out.iter_mut().zip(cards).rev() {
        *slot = (c % k) as u32;
        c /= k;
    }
}
