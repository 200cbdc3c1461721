//! Discrete tabular domains and encoded datasets.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::StageRng;

/// Default cap on the number of domain cells the enumeration paths accept.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub levels: Vec<String>,
}

impl Variable {
    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }
}

/// Size of the full joint domain. Products beyond 2^63 are only flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainSize {
    Exact(u64),
    Overflow,
}

impl DomainSize {
    pub fn fits(self, cap: u64) -> bool {
        matches!(self, DomainSize::Exact(n) if n <= cap)
    }
}

impl std::fmt::Display for DomainSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainSize::Exact(n) => write!(f, "{n}"),
            DomainSize::Overflow => write!(f, "> 2^63"),
        }
    }
}

/// Ordered list of categorical variables. Level order defines the codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    variables: Vec<Variable>,
}

impl Schema {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Schema("schema has no variables".into()));
        }
        let mut names = HashSet::new();
        for v in &variables {
            if !names.insert(v.name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", v.name)));
            }
            if v.levels.len() < 2 {
                return Err(Error::Schema(format!(
                    "variable `{}` has {} level(s), at least 2 required",
                    v.name,
                    v.levels.len()
                )));
            }
            let mut seen = HashSet::new();
            for l in &v.levels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::Schema(format!("variable `{}` repeats level `{l}`", v.name)));
                }
            }
        }
        Ok(Schema { variables })
    }

    /// Variables with levels named "0", "1", ...
    pub fn from_cardinalities(names: &[&str], cards: &[usize]) -> Result<Self> {
        if names.len() != cards.len() {
            return Err(Error::Schema("names and cardinalities differ in length".into()));
        }
        let variables = names
            .iter()
            .zip(cards)
            .map(|(n, &c)| Variable {
                name: n.to_string(),
                levels: (0..c).map(|l| l.to_string()).collect(),
            })
            .collect();
        Schema::new(variables)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let variables: Vec<Variable> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Schema::new(variables)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.variables)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn cardinality(&self, var: usize) -> usize {
        self.variables[var].levels.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(Variable::cardinality).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| Error::Schema(format!("unknown variable `{n}`")))
            })
            .collect()
    }

    pub fn domain_size(&self) -> DomainSize {
        self.variables
            .iter()
            .try_fold(1u64, |acc, v| acc.checked_mul(v.cardinality() as u64).filter(|&p| p <= 1 << 63))
            .map_or(DomainSize::Overflow, DomainSize::Exact)
    }

    /// Hex SHA-256 of the schema's JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.variables).expect("schema serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Read access to encoded rows.
///
/// The pipeline only reads the private data through this trait, which lets
/// tests observe exactly when rows are touched.
pub trait RowSource {
    fn schema(&self) -> &Schema;
    fn n_rows(&self) -> usize;
    fn row(&self, i: usize) -> &[u32];
}

/// Encoded dataset, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    schema: Schema,
    codes: Vec<u32>,
    n_rows: usize,
}

impl Dataset {
    pub fn from_rows(schema: Schema, rows: Vec<Vec<u32>>) -> Result<Self> {
        let d = schema.len();
        let mut codes = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Schema(format!("row {i} has {} values, expected {d}", row.len())));
            }
            codes.extend_from_slice(row);
        }
        Dataset::from_codes(schema, codes)
    }

    /// Builds a dataset from a flat row-major code buffer.
    pub fn from_codes(schema: Schema, codes: Vec<u32>) -> Result<Self> {
        let d = schema.len();
        if codes.len() % d != 0 {
            return Err(Error::Schema("code buffer length is not a multiple of the row width".into()));
        }
        let cards = schema.cardinalities();
        for (k, &c) in codes.iter().enumerate() {
            if c as usize >= cards[k % d] {
                return Err(Error::Schema(format!(
                    "code {c} out of range for variable `{}` in row {}",
                    schema.variables()[k % d].name,
                    k / d
                )));
            }
        }
        let n_rows = codes.len() / d;
        Ok(Dataset { schema, codes, n_rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let d = self.schema.len();
        &self.codes[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks_exact(self.schema.len())
    }

    pub fn column(&self, var: usize) -> impl Iterator<Item = u32> + '_ {
        self.rows().map(move |r| r[var])
    }

    /// Rows selected by index, with repetition allowed.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut codes = Vec::with_capacity(indices.len() * self.schema.len());
        for &i in indices {
            codes.extend_from_slice(self.row(i));
        }
        Dataset {
            schema: self.schema.clone(),
            n_rows: indices.len(),
            codes,
        }
    }

    /// Rows decoded back to their level labels.
    pub fn decode(&self) -> Vec<Vec<String>> {
        self.rows()
            .map(|r| {
                r.iter()
                    .zip(self.schema.variables())
                    .map(|(&c, v)| v.levels[c as usize].clone())
                    .collect()
            })
            .collect()
    }

    /// Writes a header row of variable names followed by level labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.schema.variables().iter().map(|v| v.name.as_str()))?;
        for r in self.rows() {
            w.write_record(
                r.iter()
                    .zip(self.schema.variables())
                    .map(|(&c, v)| v.levels[c as usize].as_str()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

impl RowSource for Dataset {
    fn schema(&self) -> &Schema {
        &self.schema
    }
    fn n_rows(&self) -> usize {
        self.n_rows
    }
    fn row(&self, i: usize) -> &[u32] {
        Dataset::row(self, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    DropRows,
    Error,
}

/// Reads a headed CSV, reordering columns into schema order and mapping
/// labels to codes by the schema's level order.
pub fn load_csv(path: &Path, schema: &Schema, missing: MissingPolicy) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let mut column_of = Vec::with_capacity(schema.len());
    for v in schema.variables() {
        let pos = header
            .iter()
            .position(|h| h.trim() == v.name)
            .ok_or_else(|| Error::Schema(format!("CSV header lacks column `{}`", v.name)))?;
        column_of.push(pos);
    }
    let lookups: Vec<HashMap<&str, u32>> = schema
        .variables()
        .iter()
        .map(|v| v.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect())
        .collect();

    let mut codes = Vec::new();
    let mut row_buf = Vec::with_capacity(schema.len());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        row_buf.clear();
        let mut missing_here = false;
        for (var, &col) in column_of.iter().enumerate() {
            let cell = record.get(col).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                match missing {
                    MissingPolicy::Error => {
                        return Err(Error::MissingValue {
                            column: schema.variables()[var].name.clone(),
                            row: i,
                        })
                    }
                    MissingPolicy::DropRows => {
                        missing_here = true;
                        break;
                    }
                }
            }
            let code = lookups[var].get(cell).ok_or_else(|| Error::UnknownLabel {
                column: schema.variables()[var].name.clone(),
                label: cell.to_string(),
            })?;
            row_buf.push(*code);
        }
        if !missing_here {
            codes.extend_from_slice(&row_buf);
        }
    }
    if codes.is_empty() {
        return Err(Error::Schema(format!("{} contains no complete rows", path.display())));
    }
    Dataset::from_codes(schema.clone(), codes)
}

/// The three-binary-variable schema of the toy experiment.
pub fn toy_schema() -> Schema {
    Schema::from_cardinalities(&["x1", "x2", "x3"], &[2, 2, 2]).expect("valid toy schema")
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Toy data: two fair coins and a third variable drawn from an
/// intercept-free logistic model with coefficients (1, 0).
pub fn sample_toy_data(n: usize, rng_seed: u64) -> Dataset {
    let mut rng = StageRng::seed_from_u64(rng_seed);
    let mut codes = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let x1 = rng.random_bool(0.5) as u32;
        let x2 = rng.random_bool(0.5) as u32;
        let p = sigmoid(x1 as f64);
        let x3 = (rng.random::<f64>() < p) as u32;
        codes.extend_from_slice(&[x1, x2, x3]);
    }
    Dataset::from_codes(toy_schema(), codes).expect("toy codes in range")
}

/// True coefficients (x1, x2) of the toy generator.
pub const TOY_TRUE_COEFFICIENTS: [f64; 2] = [1.0, 0.0];

#[cfg(test)]
mod tests {
    use super::*;


    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn schema_rejects_bad_definitions() {
        assert!(Schema::from_cardinalities(&["a", "a"], &[2, 2]).is_err());
        assert!(Schema::from_cardinalities(&["a"], &[1]).is_err());
        assert!(Schema::new(vec![]).is_err());
    }

    #[test]
    fn domain_size_flags_overflow() {
        let s = Schema::from_cardinalities(&["a", "b", "c"], &[5, 2, 3]).unwrap();
        assert_eq!(s.domain_size(), DomainSize::Exact(30));
        let names: Vec<String> = (0..70).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let big = Schema::from_cardinalities(&refs, &[2; 70]).unwrap();
        assert_eq!(big.domain_size(), DomainSize::Overflow);
        assert!(!big.domain_size().fits(DEFAULT_ENUMERATION_CAP));
    }

    #[test]
    fn csv_loads_and_reorders_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "x3,x1,x2\n1,0,0\n0,1,1\n1,1,0\n0,0,1\n");
        let d = load_csv(&p, &toy_schema(), MissingPolicy::Error).unwrap();
        assert_eq!(d.n_rows(), 4);
        assert_eq!(d.row(0), &[0, 0, 1]);
        assert_eq!(d.row(1), &[1, 1, 0]);
    }

    #[test]
    fn csv_unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "x1,x2,x3\n0,0,1\n0,yes,1\n");
        match load_csv(&p, &toy_schema(), MissingPolicy::Error) {
            Err(Error::UnknownLabel { column, label }) => {
                assert_eq!(column, "x2");
                assert_eq!(label, "yes");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_values_follow_policy() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "x1,x2,x3\n0,0,1\n0,,1\n1,1,1\n,1,0\n1,0,0\n");
        let d = load_csv(&p, &toy_schema(), MissingPolicy::DropRows).unwrap();
        assert_eq!(d.n_rows(), 3);
        match load_csv(&p, &toy_schema(), MissingPolicy::Error) {
            Err(Error::MissingValue { row, column }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "x2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_preserves_labels() {
        let schema = Schema::new(vec![
            Variable { name: "colour".into(), levels: vec!["red".into(), "green".into(), "blue".into()] },
            Variable { name: "flag".into(), levels: vec!["no".into(), "yes".into()] },
        ])
        .unwrap();
        let d = Dataset::from_rows(schema.clone(), vec![vec![2, 0], vec![0, 1], vec![1, 1]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        d.write_csv(&p).unwrap();
        let back = load_csv(&p, &schema, MissingPolicy::Error).unwrap();
        assert_eq!(back.decode(), d.decode());
        assert_eq!(back.decode()[0], vec!["blue".to_string(), "no".to_string()]);
    }

    #[test]
    fn toy_data_is_deterministic_and_in_domain() {
        let one = sample_toy_data(1, 5);
        assert_eq!(one.n_rows(), 1);
        assert!(one.row(0).iter().all(|&c| c <= 1));
        assert_eq!(sample_toy_data(300, 9), sample_toy_data(300, 9));
        assert_ne!(sample_toy_data(300, 9), sample_toy_data(300, 10));
    }

    #[test]
    fn toy_coin_columns_are_balanced() {
        for seed in 0..20 {
            let d = sample_toy_data(2000, seed);
            for var in 0..2 {
                let mean = d.column(var).map(f64::from).sum::<f64>() / 2000.0;
                assert!((0.45..=0.55).contains(&mean), "seed {seed} var {var}: {mean}");
            }
        }
    }

    #[test]
    fn toy_logistic_effect_matches_model() {
        let d = sample_toy_data(100_000, 1);
        let (mut n1, mut y1, mut n0, mut y0) = (0.0, 0.0, 0.0, 0.0);
        for r in d.rows() {
            if r[0] == 1 {
                n1 += 1.0;
                y1 += r[2] as f64;
            } else {
                n0 += 1.0;
                y0 += r[2] as f64;
            }
        }
        let diff = y1 / n1 - y0 / n0;
        let expected = sigmoid(1.0) - sigmoid(0.0);
        assert!((expected - 0.2311).abs() < 1e-4);
        assert!((diff - expected).abs() < 0.02, "{diff}");
    }
}
