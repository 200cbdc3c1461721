//! Marginal queries: evaluation, full sets, sensitivity and canonical pruning.
//!
//! A marginal query on scope `I` with value `v` is the indicator
//! `x[I] == v`. A full set on `I` holds one query per joint value of `I`, in
//! lexicographic order, so every row switches on exactly one of them.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schema::{Dataset, RowSource, Schema};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarginalQuery {
    pub scope: Vec<usize>,
    pub value: Vec<u32>,
}

impl MarginalQuery {
    pub fn matches(&self, row: &[u32]) -> bool {
        self.scope.iter().zip(&self.value).all(|(&var, &v)| row[var] == v)
    }
}

/// Queries sharing one scope, with a dense map from scoped cell to query.
#[derive(Debug, Clone)]
pub(crate) struct ScopeGroup {
    pub scope: Vec<usize>,
    pub cards: Vec<usize>,
    /// Query index for each cell of the scope (row-major, last variable fastest).
    pub cell_query: Vec<Option<usize>>,
}

impl ScopeGroup {
    pub fn cell_of(&self, row: &[u32]) -> usize {
        self.scope
            .iter()
            .zip(&self.cards)
            .fold(0, |acc, (&var, &c)| acc * c + row[var] as usize)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stored {
    full_set_scopes: Vec<Vec<usize>>,
    canonical: bool,
    queries: Vec<MarginalQuery>,
}

/// An ordered concatenation of marginal queries.
#[derive(Debug, Clone)]
pub struct QueryCollection {
    queries: Vec<MarginalQuery>,
    full_set_scopes: Vec<Vec<usize>>,
    canonical: bool,
    cards: Vec<usize>,
    groups: Vec<ScopeGroup>,
}

impl PartialEq for QueryCollection {
    fn eq(&self, other: &Self) -> bool {
        self.queries == other.queries
            && self.full_set_scopes == other.full_set_scopes
            && self.canonical == other.canonical
    }
}

fn check_scope(schema: &Schema, scope: &[usize]) -> Result<()> {
    if scope.is_empty() {
        return Err(Error::Query("empty scope".into()));
    }
    if scope.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Query(format!("scope {scope:?} is not strictly increasing")));
    }
    if let Some(&bad) = scope.iter().find(|&&v| v >= schema.len()) {
        return Err(Error::Query(format!("variable index {bad} out of range")));
    }
    Ok(())
}

/// All joint values of the scoped variables, lexicographic.
fn scope_values(cards: &[usize]) -> Vec<Vec<u32>> {
    let total: usize = cards.iter().product();
    (0..total)
        .map(|mut idx| {
            let mut v = vec![0u32; cards.len()];
            for (slot, &c) in v.iter_mut().zip(cards).rev() {
                *slot = (idx % c) as u32;
                idx /= c;
            }
            v
        })
        .collect()
}

impl QueryCollection {
    fn build(
        schema: &Schema,
        queries: Vec<MarginalQuery>,
        full_set_scopes: Vec<Vec<usize>>,
        canonical: bool,
    ) -> Result<Self> {
        let cards = schema.cardinalities();
        let mut groups: Vec<ScopeGroup> = Vec::new();
        let mut group_of: HashMap<Vec<usize>, usize> = HashMap::new();
        for (qi, q) in queries.iter().enumerate() {
            check_scope(schema, &q.scope)?;
            if q.value.len() != q.scope.len() {
                return Err(Error::Query(format!("query {qi}: value length differs from scope")));
            }
            for (&var, &v) in q.scope.iter().zip(&q.value) {
                if v as usize >= cards[var] {
                    return Err(Error::Query(format!(
                        "query {qi}: value {v} out of range for variable `{}`",
                        schema.variables()[var].name
                    )));
                }
            }
            let g = *group_of.entry(q.scope.clone()).or_insert_with(|| {
                let gcards: Vec<usize> = q.scope.iter().map(|&v| cards[v]).collect();
                let n: usize = gcards.iter().product();
                groups.push(ScopeGroup {
                    scope: q.scope.clone(),
                    cards: gcards,
                    cell_query: vec![None; n],
                });
                groups.len() - 1
            });
            let group = &mut groups[g];
            let cell = q
                .value
                .iter()
                .zip(&group.cards)
                .fold(0, |acc, (&v, &c)| acc * c + v as usize);
            if group.cell_query[cell].replace(qi).is_some() {
                return Err(Error::Query(format!("duplicate query {q:?}")));
            }
        }
        Ok(QueryCollection {
            queries,
            full_set_scopes,
            canonical,
            cards,
            groups,
        })
    }

    /// An arbitrary list of queries, not tied to any full set.
    pub fn from_queries(schema: &Schema, queries: Vec<MarginalQuery>) -> Result<Self> {
        Self::build(schema, queries, Vec::new(), false)
    }

    /// Concatenation of full marginal sets, in the given order.
    pub fn from_full_sets(schema: &Schema, scopes: &[Vec<usize>]) -> Result<Self> {
        if scopes.is_empty() {
            return Err(Error::Query("no scopes given".into()));
        }
        let mut queries = Vec::new();
        for (i, scope) in scopes.iter().enumerate() {
            check_scope(schema, scope)?;
            if scopes[..i].contains(scope) {
                return Err(Error::Query(format!("scope {scope:?} listed twice")));
            }
            let cards: Vec<usize> = scope.iter().map(|&v| schema.cardinality(v)).collect();
            queries.extend(scope_values(&cards).into_iter().map(|value| MarginalQuery {
                scope: scope.clone(),
                value,
            }));
        }
        Self::build(schema, queries, scopes.to_vec(), false)
    }

    pub fn queries(&self) -> &[MarginalQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Scopes of the full sets this collection was derived from (`n_s` of them).
    pub fn full_set_scopes(&self) -> &[Vec<usize>] {
        &self.full_set_scopes
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    pub(crate) fn groups(&self) -> &[ScopeGroup] {
        &self.groups
    }

    /// Indices of the queries that evaluate to 1 on `row`.
    pub fn active(&self, row: &[u32]) -> Vec<usize> {
        self.groups
            .iter()
            .filter_map(|g| g.cell_query[g.cell_of(row)])
            .collect()
    }

    pub fn evaluate(&self, row: &[u32]) -> Vec<u8> {
        let mut out = vec![0u8; self.len()];
        for q in self.active(row) {
            out[q] = 1;
        }
        out
    }

    pub fn evaluate_rows<R: RowSource + ?Sized>(&self, data: &R) -> Vec<u64> {
        let mut s = vec![0u64; self.len()];
        for i in 0..data.n_rows() {
            let row = data.row(i);
            for g in &self.groups {
                if let Some(q) = g.cell_query[g.cell_of(row)] {
                    s[q] += 1;
                }
            }
        }
        s
    }

    pub fn evaluate_dataset(&self, data: &Dataset) -> Vec<u64> {
        self.evaluate_rows(data)
    }

    /// L2 sensitivity `sqrt(2 n_s)` of a concatenation of `n_s` full sets
    /// under substitution of one row. Canonical collections report the bound
    /// of the collection they were pruned from.
    pub fn sensitivity(&self) -> Result<f64> {
        if self.full_set_scopes.is_empty() {
            return Err(Error::Query("sensitivity requires a collection built from full sets".into()));
        }
        Ok((2.0 * self.full_set_scopes.len() as f64).sqrt())
    }

    /// Prunes linear dependencies using the canonical parametrisation with
    /// reference assignment all-zeros.
    ///
    /// Each canonical query (scope `D` in the downward closure of the input
    /// scopes, all values non-reference) is replaced by the cells of one
    /// containing input scope that sum to it; repeated cells collapse. The
    /// result is a subset of the original queries with full affine rank.
    pub fn canonicalize(&self, schema: &Schema) -> Result<QueryCollection> {
        let scopes = &self.full_set_scopes;
        if scopes.is_empty() {
            return Err(Error::Query("canonicalize requires a collection built from full sets".into()));
        }
        let card = |v: usize| schema.cardinality(v);

        let mut closure: BTreeSet<Vec<usize>> = BTreeSet::new();
        for scope in scopes {
            for mask in 1u64..(1u64 << scope.len()) {
                let sub: Vec<usize> = scope
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &v)| v)
                    .collect();
                closure.insert(sub);
            }
        }
        let mut closure: Vec<Vec<usize>> = closure.into_iter().collect();
        closure.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

        let expected: usize = closure
            .iter()
            .map(|d| d.iter().map(|&v| card(v) - 1).product::<usize>())
            .sum();

        // selected[f][cell] marks chosen cells of input scope f
        let mut selected: Vec<Vec<bool>> = scopes
            .iter()
            .map(|s| vec![false; s.iter().map(|&v| card(v)).product()])
            .collect();
        let values: Vec<Vec<Vec<u32>>> = scopes
            .iter()
            .map(|s| scope_values(&s.iter().map(|&v| card(v)).collect::<Vec<_>>()))
            .collect();

        for d in &closure {
            let mut best: Option<(usize, Vec<usize>)> = None;
            for (fi, f) in scopes.iter().enumerate() {
                if !d.iter().all(|v| f.contains(v)) {
                    continue;
                }
                let pos: Vec<usize> = d.iter().map(|v| f.iter().position(|x| x == v).unwrap()).collect();
                let cells: Vec<usize> = values[fi]
                    .iter()
                    .enumerate()
                    .filter(|(_, val)| pos.iter().all(|&p| val[p] != 0))
                    .map(|(c, _)| c)
                    .collect();
                let fresh = cells.iter().filter(|&&c| !selected[fi][c]).count();
                if best.as_ref().is_none_or(|(bf, bc)| {
                    let best_fresh = bc.iter().filter(|&&c| !selected[*bf][c]).count();
                    fresh < best_fresh
                }) {
                    best = Some((fi, cells));
                }
            }
            let (fi, cells) = best.expect("closure scopes have a containing full set");
            for c in cells {
                selected[fi][c] = true;
            }
        }

        let mut queries = Vec::with_capacity(expected);
        for (fi, scope) in scopes.iter().enumerate() {
            for (c, val) in values[fi].iter().enumerate() {
                if selected[fi][c] {
                    queries.push(MarginalQuery {
                        scope: scope.clone(),
                        value: val.clone(),
                    });
                }
            }
        }
        if queries.len() != expected {
            return Err(Error::TyingRequired(format!(
                "{} replacement queries for {} canonical parameters",
                queries.len(),
                expected
            )));
        }
        Self::build(schema, queries, scopes.clone(), true)
    }

    /// Hex SHA-256 over the query list, its full-set scopes and flag.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&self.stored()).expect("queries serialise");
        hex::encode(Sha256::digest(&bytes))
    }

    fn stored(&self) -> Stored {
        Stored {
            full_set_scopes: self.full_set_scopes.clone(),
            canonical: self.canonical,
            queries: self.queries.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.stored()).expect("queries serialise")
    }

    pub fn from_json(schema: &Schema, value: serde_json::Value) -> Result<Self> {
        let s: Stored = serde_json::from_value(value)?;
        Self::build(schema, s.queries, s.full_set_scopes, s.canonical)
    }
}

/// Full marginal set on one scope.
pub fn full_marginal_set(schema: &Schema, scope: &[usize]) -> Result<QueryCollection> {
    QueryCollection::from_full_sets(schema, &[scope.to_vec()])
}

/// Reads a JSON list of scopes, each a list of variable names, and returns
/// them as sorted index lists.
pub fn load_query_spec(path: &Path, schema: &Schema) -> Result<Vec<Vec<usize>>> {
    let names: Vec<Vec<String>> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    scopes_from_names(schema, &names)
}

pub fn scopes_from_names(schema: &Schema, names: &[Vec<String>]) -> Result<Vec<Vec<usize>>> {
    names
        .iter()
        .map(|scope| {
            let mut idx = schema.resolve(scope)?;
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Query(format!("scope {scope:?} repeats a variable")));
            }
            Ok(idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::toy_schema;

    #[test]
    fn full_set_sizes() {
        let s = toy_schema();
        assert_eq!(full_marginal_set(&s, &[0, 1]).unwrap().len(), 4);
        assert_eq!(full_marginal_set(&s, &[0, 1, 2]).unwrap().len(), 8);
        assert!(full_marginal_set(&s, &[]).is_err());
        assert!(full_marginal_set(&s, &[1, 0]).is_err());
        assert!(full_marginal_set(&s, &[3]).is_err());
    }

    #[test]
    fn evaluate_is_one_hot_in_lexicographic_order() {
        let s = toy_schema();
        let q = full_marginal_set(&s, &[0, 1]).unwrap();
        assert_eq!(q.evaluate(&[0, 1, 0]), vec![0, 1, 0, 0]);
        assert_eq!(q.evaluate(&[1, 0, 1]), vec![0, 0, 1, 0]);
    }

    #[test]
    fn canonical_one_way_is_zero_at_reference() {
        let s = toy_schema();
        let c = full_marginal_set(&s, &[0]).unwrap().canonicalize(&s).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.queries()[0].value, vec![1]);
        assert_eq!(c.evaluate(&[0, 1, 1]), vec![0]);
        assert_eq!(c.evaluate(&[1, 1, 1]), vec![1]);
    }

    #[test]
    fn canonical_three_way_keeps_seven() {
        let s = toy_schema();
        let c = full_marginal_set(&s, &[0, 1, 2]).unwrap().canonicalize(&s).unwrap();
        assert_eq!(c.len(), 7);
        assert!(c.queries().iter().all(|q| q.value != vec![0, 0, 0]));
        assert!(c.is_canonical());
        assert_eq!(c.sensitivity().unwrap(), 2f64.sqrt());
    }

    #[test]
    fn evaluate_dataset_sums_rows() {
        let s = toy_schema();
        let q = QueryCollection::from_full_sets(&s, &[vec![0, 1], vec![2]]).unwrap();
        let d = Dataset::from_rows(s.clone(), vec![vec![1, 0, 1]; 4]).unwrap();
        let row = q.evaluate(&[1, 0, 1]);
        let counts = q.evaluate_dataset(&d);
        assert_eq!(counts, row.iter().map(|&b| 4 * b as u64).collect::<Vec<_>>());
        assert_eq!(counts[..4].iter().sum::<u64>(), 4);
    }

    #[test]
    fn sensitivity_of_concatenations() {
        let s = toy_schema();
        let one = full_marginal_set(&s, &[0, 1]).unwrap();
        assert_eq!(one.sensitivity().unwrap(), 2f64.sqrt());
        let three = QueryCollection::from_full_sets(&s, &[vec![0, 1], vec![0, 2], vec![1, 2]]).unwrap();
        assert!((three.sensitivity().unwrap() - 6f64.sqrt()).abs() < 1e-15);
        let loose = QueryCollection::from_queries(&s, one.queries().to_vec()).unwrap();
        assert!(loose.sensitivity().is_err());
    }

    #[test]
    fn duplicate_scopes_rejected() {
        let s = toy_schema();
        assert!(QueryCollection::from_full_sets(&s, &[vec![0], vec![0]]).is_err());
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let s = toy_schema();
        let c = QueryCollection::from_full_sets(&s, &[vec![0, 1], vec![1, 2]])
            .unwrap()
            .canonicalize(&s)
            .unwrap();
        let back = QueryCollection::from_json(&s, c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        let other = full_marginal_set(&s, &[0, 1]).unwrap();
        assert_ne!(other.fingerprint(), c.fingerprint());
    }

    #[test]
    fn scope_names_resolve_sorted() {
        let s = toy_schema();
        let scopes = scopes_from_names(&s, &[vec!["x3".into(), "x1".into()]]).unwrap();
        assert_eq!(scopes, vec![vec![0, 2]]);
        assert!(scopes_from_names(&s, &[vec!["x9".into()]]).is_err());
        assert!(scopes_from_names(&s, &[vec!["x1".into(), "x1".into()]]).is_err());
    }
}
