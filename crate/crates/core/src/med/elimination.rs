//! Exact inference by variable elimination over the query-induced Markov
//! network.
//!
//! The intermediate products formed while eliminating each variable are the
//! cliques of the induced junction tree; they are kept for backward sampling.
//! Elimination orders come from the min-fill heuristic with ties broken by
//! variable index.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::factor::{log_sum_exp, LogFactor};
use super::MomentPair;
use crate::error::{Error, Result};
use crate::queries::{QueryCollection, ScopeGroup};
use crate::schema::Schema;

/// Default limit on the induced width accepted by the junction-tree backend.
pub const DEFAULT_WIDTH_LIMIT: usize = 12;

#[derive(Debug, Clone)]
pub(crate) struct JunctionTreeEngine {
    cards: Vec<usize>,
    groups: Vec<ScopeGroup>,
    n_queries: usize,
    order: Vec<usize>,
    width: usize,
}

/// Min-fill elimination order of `eliminate` on the interaction graph of
/// `scopes`, and the induced width of that order.
pub(crate) fn min_fill_order(n_vars: usize, scopes: &[Vec<usize>], eliminate: &[usize]) -> (Vec<usize>, usize) {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_vars];
    for s in scopes {
        for &a in s {
            for &b in s {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    let mut remaining: BTreeSet<usize> = eliminate.iter().copied().collect();
    let mut order = Vec::with_capacity(remaining.len());
    let mut width = 0;
    while !remaining.is_empty() {
        let fill = |v: usize| {
            let nb: Vec<usize> = adj[v].iter().copied().collect();
            let mut count = 0;
            for (i, &a) in nb.iter().enumerate() {
                for &b in &nb[i + 1..] {
                    if !adj[a].contains(&b) {
                        count += 1;
                    }
                }
            }
            count
        };
        // ties resolve to the smallest index since `remaining` is ordered
        let v = *remaining.iter().min_by_key(|&&v| fill(v)).unwrap();
        let nb: Vec<usize> = adj[v].iter().copied().collect();
        width = width.max(nb.len());
        for &a in &nb {
            for &b in &nb {
                if a != b {
                    adj[a].insert(b);
                }
            }
            adj[a].remove(&v);
        }
        adj[v].clear();
        remaining.remove(&v);
        order.push(v);
    }
    (order, width)
}

impl JunctionTreeEngine {
    pub fn new(schema: &Schema, queries: &QueryCollection, width_limit: usize) -> Result<Self> {
        let cards = schema.cardinalities();
        let groups = queries.groups().to_vec();
        let scopes: Vec<Vec<usize>> = groups.iter().map(|g| g.scope.clone()).collect();
        let all: Vec<usize> = (0..cards.len()).collect();
        let (order, width) = min_fill_order(cards.len(), &scopes, &all);
        if width > width_limit {
            return Err(Error::TreeWidth {
                width,
                limit: width_limit,
            });
        }
        Ok(JunctionTreeEngine {
            cards,
            groups,
            n_queries: queries.len(),
            order,
            width,
        })
    }

    pub fn induced_width(&self) -> usize {
        self.width
    }

    fn factors(&self, theta: &[f64]) -> Vec<LogFactor> {
        let mut covered = vec![false; self.cards.len()];
        let mut out: Vec<LogFactor> = self
            .groups
            .iter()
            .map(|g| {
                for &v in &g.scope {
                    covered[v] = true;
                }
                let mut f = LogFactor::zeros(g.scope.clone(), g.cards.clone());
                for (cell, q) in g.cell_query.iter().enumerate() {
                    if let Some(q) = q {
                        f.values[cell] = theta[*q];
                    }
                }
                f
            })
            .collect();
        for (v, &c) in covered.iter().enumerate() {
            if !c {
                out.push(LogFactor::zeros(vec![v], vec![self.cards[v]]));
            }
        }
        out
    }

    /// Eliminates `order` from `factors`, returning the remaining factors and,
    /// per eliminated variable, the product formed just before summing it out.
    fn eliminate(&self, mut factors: Vec<LogFactor>, order: &[usize], keep_cliques: bool) -> (Vec<LogFactor>, Vec<LogFactor>) {
        let mut cliques = Vec::new();
        for &v in order {
            let (with, without): (Vec<LogFactor>, Vec<LogFactor>) = factors.into_iter().partition(|f| f.contains(v));
            factors = without;
            if with.is_empty() {
                continue;
            }
            let refs: Vec<&LogFactor> = with.iter().collect();
            let product = LogFactor::product(&refs, &self.cards);
            factors.push(product.sum_out(v));
            if keep_cliques {
                cliques.push(product);
            }
        }
        (factors, cliques)
    }

    pub fn log_partition(&self, theta: &[f64]) -> f64 {
        let (rest, _) = self.eliminate(self.factors(theta), &self.order, false);
        rest.iter().map(|f| f.values[0]).sum()
    }

    /// Normalised joint marginal over `vars` (ascending), last variable fastest.
    pub fn marginal(&self, theta: &[f64], vars: &[usize]) -> Vec<f64> {
        let factors = self.factors(theta);
        let keep: BTreeSet<usize> = vars.iter().copied().collect();
        let drop: Vec<usize> = (0..self.cards.len()).filter(|v| !keep.contains(v)).collect();
        let scopes: Vec<Vec<usize>> = factors.iter().map(|f| f.vars.clone()).collect();
        let (order, _) = min_fill_order(self.cards.len(), &scopes, &drop);
        let (rest, _) = self.eliminate(factors, &order, false);
        let refs: Vec<&LogFactor> = rest.iter().collect();
        let joint = LogFactor::product(&refs, &self.cards);
        let z = log_sum_exp(joint.values.iter().copied());
        // `joint.vars` is the sorted set of `vars`; remap if the caller's order differs
        let probs: Vec<f64> = joint.values.iter().map(|x| (x - z).exp()).collect();
        if joint.vars == vars {
            return probs;
        }
        let sub_cards: Vec<usize> = vars.iter().map(|&v| self.cards[v]).collect();
        let mut out = vec![0.0; probs.len()];
        let mut asg = vec![0u32; self.cards.len()];
        for (i, &p) in probs.iter().enumerate() {
            super::enumeration::decode_cell(i, &joint.cards, &mut asg[..joint.vars.len()]);
            let mut full = vec![0u32; self.cards.len()];
            for (k, &v) in joint.vars.iter().enumerate() {
                full[v] = asg[k];
            }
            let idx = vars.iter().zip(&sub_cards).fold(0, |acc, (&v, &c)| acc * c + full[v] as usize);
            out[idx] = p;
        }
        out
    }

    fn union_marginal<'a>(
        &self,
        theta: &[f64],
        vars: Vec<usize>,
        cache: &'a mut HashMap<Vec<usize>, Vec<f64>>,
    ) -> (&'a Vec<f64>, Vec<usize>) {
        let table = cache.entry(vars.clone()).or_insert_with(|| self.marginal(theta, &vars));
        (table, vars)
    }

    fn union_of(&self, groups: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = groups.iter().flat_map(|&g| self.groups[g].scope.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn moments(&self, theta: &[f64]) -> MomentPair {
        let k = self.n_queries;
        let mut cache = HashMap::new();
        let mut mu = DVector::zeros(k);
        for g in &self.groups {
            let (table, _) = self.union_marginal(theta, g.scope.clone(), &mut cache);
            for (cell, q) in g.cell_query.iter().enumerate() {
                if let Some(q) = q {
                    mu[*q] = table[cell];
                }
            }
        }
        let mut second = DMatrix::<f64>::zeros(k, k);
        let mut row = vec![0u32; self.cards.len()];
        for g1 in 0..self.groups.len() {
            for g2 in g1..self.groups.len() {
                let vars = self.union_of(&[g1, g2]);
                let cards: Vec<usize> = vars.iter().map(|&v| self.cards[v]).collect();
                let (table, vars) = self.union_marginal(theta, vars, &mut cache);
                for (cell, &p) in table.iter().enumerate() {
                    scatter(cell, &vars, &cards, &mut row);
                    let a = self.groups[g1].cell_query[self.groups[g1].cell_of(&row)];
                    let b = self.groups[g2].cell_query[self.groups[g2].cell_of(&row)];
                    if let (Some(a), Some(b)) = (a, b) {
                        second[(a, b)] += p;
                        if g1 != g2 {
                            second[(b, a)] += p;
                        }
                    }
                }
            }
        }
        let sigma = DMatrix::from_fn(k, k, |a, b| second[(a, b)] - mu[a] * mu[b]);
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        MomentPair { mu, sigma }
    }

    pub fn third_cumulant_contraction(&self, theta: &[f64], mu: &DVector<f64>, m: &DMatrix<f64>) -> DVector<f64> {
        let ng = self.groups.len();
        let members: Vec<Vec<usize>> = self
            .groups
            .iter()
            .map(|g| g.cell_query.iter().flatten().copied().collect())
            .collect();
        // per ordered group pair: M[gi,gj] mu_gj (over gi), mu_gi' M[gi,gj] (over gj), mu_gi' M mu_gj
        let mut out = DVector::zeros(self.n_queries);
        let mut cache = HashMap::new();
        let mut row = vec![0u32; self.cards.len()];
        for gi in 0..ng {
            for gj in 0..ng {
                let mut right = HashMap::new();
                for &i in &members[gi] {
                    right.insert(i, members[gj].iter().map(|&j| m[(i, j)] * mu[j]).sum::<f64>());
                }
                let mut left = HashMap::new();
                for &j in &members[gj] {
                    left.insert(j, members[gi].iter().map(|&i| mu[i] * m[(i, j)]).sum::<f64>());
                }
                let constant: f64 = members[gi].iter().map(|&i| mu[i] * right[&i]).sum();
                for gk in 0..ng {
                    let vars = self.union_of(&[gi, gj, gk]);
                    let cards: Vec<usize> = vars.iter().map(|&v| self.cards[v]).collect();
                    let (table, vars) = self.union_marginal(theta, vars, &mut cache);
                    let mut total = 0.0;
                    for (cell, &p) in table.iter().enumerate() {
                        scatter(cell, &vars, &cards, &mut row);
                        let a = self.groups[gi].cell_query[self.groups[gi].cell_of(&row)];
                        let b = self.groups[gj].cell_query[self.groups[gj].cell_of(&row)];
                        let c = self.groups[gk].cell_query[self.groups[gk].cell_of(&row)];
                        let mut f = constant;
                        if let Some(a) = a {
                            f -= right[&a];
                        }
                        if let Some(b) = b {
                            f -= left[&b];
                        }
                        if let (Some(a), Some(b)) = (a, b) {
                            f += m[(a, b)];
                        }
                        let w = p * f;
                        total += w;
                        if let Some(c) = c {
                            out[c] += w;
                        }
                    }
                    for &k in &members[gk] {
                        out[k] -= mu[k] * total;
                    }
                }
            }
        }
        out
    }

    /// Backward sampling through the elimination cliques.
    pub fn sample<R: Rng>(&self, theta: &[f64], n_rows: usize, rng: &mut R) -> Vec<u32> {
        let (_, cliques) = self.eliminate(self.factors(theta), &self.order, true);
        let d = self.cards.len();
        let mut codes = vec![0u32; n_rows * d];
        let mut buf = Vec::new();
        let mut row = vec![0u32; d];
        // cliques[i] belongs to order[i]; its other variables are eliminated later
        let steps: Vec<(usize, &LogFactor)> = self.order.iter().copied().zip(cliques.iter()).rev().collect();
        for r in 0..n_rows {
            for &(v, clique) in &steps {
                clique.slice(v, &mut row, &mut buf);
                let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = buf.iter().map(|x| (x - m).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = weights.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = k;
                        break;
                    }
                    u -= w;
                }
                row[v] = pick as u32;
            }
            codes[r * d..(r + 1) * d].copy_from_slice(&row);
        }
        codes
    }
}

/// Writes the assignment of `cell` (over `vars` with `cards`) into `row`.
fn scatter(mut cell: usize, vars: &[usize], cards: &[usize], row: &mut [u32]) {
    for (&v, &c) in vars.iter().zip(cards).rev() {
        row[v] = (cell % c) as u32;
        cell /= c;
    }
}
