//! Repeated-run coverage experiments and their plot tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_posterior, private_release, run_mi_analysis, synthesize, DownstreamSpec, InferenceMethod};
use crate::analysis::{logistic_fit, logistic_fit_weighted, naive_interval, LogisticSpec, VarianceMethod};
use crate::error::{Error, Result, StageExt};
use crate::inference::NutsConfig;
use crate::med::{fit_pgm_mle, Backend, Engine, PgmOptions};
use crate::privacy::PrivacyBudget;
use crate::queries::QueryCollection;
use crate::rng::{derive_seed, stage};
use crate::schema::{sample_toy_data, toy_schema, Dataset, Schema, DEFAULT_ENUMERATION_CAP, TOY_TRUE_COEFFICIENTS};

/// Nominal levels reported by default.
pub const COVERAGE_LEVELS: [f64; 7] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Noise-aware posterior and multiple datasets.
    NaMi,
    /// Point estimate from the PGM objective and multiple datasets.
    MinusNa,
    /// One posterior draw, one dataset, naive interval.
    MinusMi,
    /// PGM point estimate, one dataset, naive interval.
    MinusBoth,
    /// PGM point estimate, `m` datasets, naive analyses averaged.
    PgmMleBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::NaMi, Mode::MinusNa, Mode::MinusMi, Mode::MinusBoth, Mode::PgmMleBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NaMi => "na_mi",
            Mode::MinusNa => "minus_na",
            Mode::MinusMi => "minus_mi",
            Mode::MinusBoth => "minus_both",
            Mode::PgmMleBaseline => "pgm_mle_baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Three binary variables; the third follows a logistic model on the
    /// first two with coefficients (1, 0).
    Toy,
    /// Six categorical variables (cardinalities 5, 2, 2, 3, 2, 2) drawn from a
    /// fixed pairwise model of tree width 2.
    StandIn,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scenario::Toy),
            "stand_in" => Ok(Scenario::StandIn),
            _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

pub(crate) const STAND_IN_EDGES: [(usize, usize); 7] = [(0, 1), (0, 3), (1, 3), (0, 2), (2, 5), (3, 4), (4, 5)];

pub(crate) fn stand_in_schema() -> Schema {
    Schema::from_cardinalities(&["v0", "v1", "v2", "v3", "v4", "v5"], &[5, 2, 2, 3, 2, 2]).expect("valid schema")
}

/// Fixed generating parameters of the stand-in model.
pub(crate) fn stand_in_theta(k: usize) -> Vec<f64> {
    (0..k).map(|j| 0.8 * (1.7 * j as f64 + 0.3).sin()).collect()
}

/// Everything about a scenario that does not depend on the repeat.
pub(crate) struct Setup {
    pub schema: Schema,
    pub queries: QueryCollection,
    pub engine: Arc<Engine>,
    pub dependent: usize,
    pub independents: Vec<usize>,
    /// Coefficient names and true values, intercept excluded.
    pub targets: Vec<(String, f64)>,
    dgp: Option<Vec<f64>>,
}

impl Setup {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let (schema, scopes, dependent, independents) = match scenario {
            Scenario::Toy => (toy_schema(), vec![vec![0, 1, 2]], 2, vec![0, 1]),
            Scenario::StandIn => (
                stand_in_schema(),
                STAND_IN_EDGES.iter().map(|&(a, b)| vec![a, b]).collect(),
                1,
                vec![0, 3],
            ),
        };
        let queries = super::build_queries(&schema, &scopes)?;
        let backend = Backend::auto(&schema, DEFAULT_ENUMERATION_CAP);
        let engine = Arc::new(Engine::new(&schema, &queries, backend)?);
        let (targets, dgp) = match scenario {
            Scenario::Toy => (
                vec![
                    ("x1".to_string(), TOY_TRUE_COEFFICIENTS[0]),
                    ("x2".to_string(), TOY_TRUE_COEFFICIENTS[1]),
                ],
                None,
            ),
            Scenario::StandIn => {
                let theta = stand_in_theta(queries.len());
                let mut vars = vec![dependent];
                vars.extend(&independents);
                let probs = engine.marginal(&theta, &vars)?;
                let cards: Vec<usize> = vars.iter().map(|&v| schema.cardinality(v)).collect();
                let cells: Vec<(Vec<u32>, f64)> = probs
                    .iter()
                    .enumerate()
                    .map(|(mut idx, &p)| {
                        let mut row = vec![0u32; schema.len()];
                        for (&v, &c) in vars.iter().zip(&cards).rev() {
                            row[v] = (idx % c) as u32;
                            idx /= c;
                        }
                        (row, p * 1e6)
                    })
                    .collect();
                let (names, beta) = logistic_fit_weighted(&schema, dependent, &independents, &cells)?;
                (names.into_iter().zip(beta).skip(1).collect(), Some(theta))
            }
        };
        Ok(Setup {
            schema,
            queries,
            engine,
            dependent,
            independents,
            targets,
            dgp,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        match &self.dgp {
            None => Ok(sample_toy_data(n, seed)),
            Some(theta) => self.engine.sample(theta, n, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub repeats: usize,
    pub epsilons: Vec<f64>,
    pub mode: Mode,
    pub seed: u64,
    /// Original (and synthetic) data size.
    pub n: usize,
    pub m: usize,
    /// `n^-2` when absent.
    #[serde(default)]
    pub delta: Option<f64>,
    pub inference: InferenceMethod,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub drop_threshold: Option<f64>,
}

fn default_levels() -> Vec<f64> {
    COVERAGE_LEVELS.to_vec()
}

impl ExperimentConfig {
    /// Toy setup: n = 2000, m = 100, Laplace inference.
    pub fn toy(repeats: usize, epsilons: Vec<f64>, mode: Mode, seed: u64) -> Self {
        ExperimentConfig {
            scenario: Scenario::Toy,
            repeats,
            epsilons,
            mode,
            seed,
            n: 2000,
            m: 100,
            delta: None,
            inference: InferenceMethod::Laplace,
            levels: default_levels(),
            drop_threshold: None,
        }
    }

    /// Six-variable setup: n = 20000, m = 100, NUTS with 2 chains of 400
    /// warmup and 1000 kept draws.
    pub fn stand_in(repeats: usize, epsilons: Vec<f64>, mode: Mode, seed: u64) -> Self {
        ExperimentConfig {
            scenario: Scenario::StandIn,
            repeats,
            epsilons,
            mode,
            seed,
            n: 20_000,
            m: 100,
            delta: None,
            inference: InferenceMethod::Nuts {
                config: NutsConfig {
                    chains: 2,
                    warmup: 400,
                    samples: 1000,
                    ..NutsConfig::default()
                },
            },
            levels: default_levels(),
            drop_threshold: Some(crate::analysis::DEFAULT_VARIANCE_THRESHOLD),
        }
    }

    fn delta(&self) -> f64 {
        self.delta.unwrap_or(1.0 / (self.n as f64).powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("at least one repeat is required".into()));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("no privacy levels given".into()));
        }
        for &e in &self.epsilons {
            PrivacyBudget::new(e, self.delta())?;
        }
        if self.n == 0 {
            return Err(Error::Config("data size must be positive".into()));
        }
        let multi = matches!(self.mode, Mode::NaMi | Mode::MinusNa | Mode::PgmMleBaseline);
        if multi && self.m < 2 {
            return Err(Error::Config(format!("mode {} needs m >= 2", self.mode.name())));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("confidence levels must lie in (0, 1)".into()));
        }
        if let InferenceMethod::Nuts { config } = &self.inference {
            config.validate()?;
        }
        Ok(())
    }
}

/// One interval for one coefficient, level, repeat and privacy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub epsilon: f64,
    pub repeat: usize,
    pub coefficient: String,
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
    pub covered: bool,
    /// Width divided by the width of the same interval fitted on the real data.
    pub width_ratio: f64,
    pub dropped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub epsilon: f64,
    pub coefficient: String,
    pub level: f64,
    pub coverage: f64,
    pub repeats: usize,
    pub mean_dropped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRecord {
    pub epsilon: f64,
    pub coefficient: String,
    pub level: f64,
    pub median_width: f64,
    pub median_width_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub epsilon: f64,
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub epsilon: f64,
    pub repeat: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub mode: Mode,
    pub epsilons: Vec<f64>,
    pub levels: Vec<f64>,
    pub repeats: usize,
    pub intervals: Vec<IntervalRecord>,
    pub coverage: Vec<CoverageRecord>,
    pub widths: Vec<WidthRecord>,
    pub failures: Vec<FailureRecord>,
    pub runtimes: Vec<RuntimeRecord>,
}

impl ExperimentReport {
    pub fn coverage_at(&self, epsilon: f64, coefficient: &str, level: f64) -> Option<f64> {
        self.coverage
            .iter()
            .find(|c| c.epsilon == epsilon && c.coefficient == coefficient && c.level == level)
            .map(|c| c.coverage)
    }

    pub fn median_width_at(&self, epsilon: f64, coefficient: &str, level: f64) -> Option<f64> {
        self.widths
            .iter()
            .find(|w| w.epsilon == epsilon && w.coefficient == coefficient && w.level == level)
            .map(|w| w.median_width)
    }

    pub fn coefficients(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.intervals {
            if !names.contains(&r.coefficient) {
                names.push(r.coefficient.clone());
            }
        }
        names
    }

    pub fn failed(&self, epsilon: f64) -> usize {
        self.failures.iter().filter(|f| f.epsilon == epsilon).count()
    }
}

struct RepeatOutcome {
    records: Vec<IntervalRecord>,
    seconds: f64,
}

fn run_repeat(cfg: &ExperimentConfig, setup: &Setup, repeat: usize, epsilon: f64) -> Result<RepeatOutcome> {
    let start = Instant::now();
    let repeat_seed = derive_seed(cfg.seed, &[stage::REPEAT, repeat as u64]);
    let data = setup.sample(cfg.n, derive_seed(repeat_seed, &[stage::TOY_DATA])).stage("load")?;
    let seed = derive_seed(repeat_seed, &[epsilon.to_bits()]);

    let reference = logistic_fit(&data, setup.dependent, &setup.independents, 0.0, VarianceMethod::ObservedInformation)
        .stage("reference")?;
    let reference_iv: Vec<Vec<(f64, f64)>> = cfg
        .levels
        .iter()
        .map(|&l| naive_interval(&reference, l))
        .collect::<Result<_>>()?;

    let budget = PrivacyBudget::new(epsilon, cfg.delta())?;
    let (release, n) =
        private_release(data, &setup.queries, budget, derive_seed(seed, &[stage::NOISE])).stage("release")?;

    let spec = DownstreamSpec {
        regression: LogisticSpec {
            dependent: setup.schema.variables()[setup.dependent].name.clone(),
            independents: setup
                .independents
                .iter()
                .map(|&j| setup.schema.variables()[j].name.clone())
                .collect(),
            reg_lambda: 0.0,
            variance: VarianceMethod::ObservedInformation,
        },
        levels: cfg.levels.clone(),
        drop_threshold: cfg.drop_threshold,
    };
    let pgm = || {
        fit_pgm_mle(&release, &setup.queries, &setup.schema, n, setup.engine.backend(), PgmOptions::default())
            .map(|model| model.theta().to_vec())
            .stage("pgm")
    };
    let single = |draws: &[Vec<f64>]| -> Result<Vec<Dataset>> { synthesize(&setup.engine, draws, n, seed).stage("synthesis") };

    // per level, per coefficient name: (lo, hi, dropped fraction)
    let mut intervals: Vec<Vec<(String, f64, f64, f64)>> = Vec::with_capacity(cfg.levels.len());
    match cfg.mode {
        Mode::NaMi | Mode::MinusNa => {
            let draws = if cfg.mode == Mode::NaMi {
                fit_posterior(setup.engine.clone(), &setup.queries, &release, n, &cfg.inference, cfg.m, seed)
                    .stage("inference")?
                    .draws
            } else {
                vec![pgm()?; cfg.m]
            };
            let datasets = single(&draws)?;
            let mi = run_mi_analysis(&datasets, &spec, n).stage("analysis")?;
            for &level in &cfg.levels {
                intervals.push(
                    mi.intervals
                        .iter()
                        .filter(|r| r.level == level)
                        .map(|r| (r.name.clone(), r.ci_lo, r.ci_hi, r.dropped_fraction))
                        .collect(),
                );
            }
        }
        Mode::MinusMi | Mode::MinusBoth | Mode::PgmMleBaseline => {
            let draws = match cfg.mode {
                Mode::MinusMi => {
                    fit_posterior(setup.engine.clone(), &setup.queries, &release, n, &cfg.inference, 1, seed)
                        .stage("inference")?
                        .draws
                }
                Mode::MinusBoth => vec![pgm()?],
                _ => vec![pgm()?; cfg.m],
            };
            let datasets = single(&draws)?;
            let fits = datasets
                .iter()
                .map(|d| logistic_fit(d, setup.dependent, &setup.independents, 0.0, VarianceMethod::ObservedInformation))
                .collect::<Result<Vec<_>>>()
                .stage("analysis")?;
            let k = fits[0].q.len();
            let pooled = crate::analysis::AnalysisResult {
                names: fits[0].names.clone(),
                q: (0..k).map(|j| fits.iter().map(|f| f.q[j]).sum::<f64>() / fits.len() as f64).collect(),
                v: (0..k).map(|j| fits.iter().map(|f| f.v[j]).sum::<f64>() / fits.len() as f64).collect(),
                converged: fits.iter().all(|f| f.converged),
            };
            for &level in &cfg.levels {
                let iv = naive_interval(&pooled, level)?;
                intervals.push(
                    pooled
                        .names
                        .iter()
                        .zip(iv)
                        .map(|(name, (lo, hi))| (name.clone(), lo, hi, 0.0))
                        .collect(),
                );
            }
        }
    }

    let mut records = Vec::new();
    for (li, &level) in cfg.levels.iter().enumerate() {
        for (name, truth) in &setup.targets {
            let j = reference
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("coefficient `{name}` not in the regression")))?;
            let (_, lo, hi, dropped) = intervals[li]
                .iter()
                .find(|(n, ..)| n == name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no interval for `{name}`")))?;
            let (rlo, rhi) = reference_iv[li][j];
            records.push(IntervalRecord {
                epsilon,
                repeat,
                coefficient: name.clone(),
                level,
                lo,
                hi,
                truth: *truth,
                covered: lo <= *truth && *truth <= hi,
                width_ratio: (hi - lo) / (rhi - rlo),
                dropped_fraction: dropped,
            });
        }
    }
    Ok(RepeatOutcome {
        records,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Repeats the chosen pipeline variant on fresh data for every privacy level
/// and records interval coverage of the true coefficients.
pub fn run_coverage_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let setup = Setup::new(cfg.scenario)?;
    let jobs: Vec<(f64, usize)> = cfg
        .epsilons
        .iter()
        .flat_map(|&e| (0..cfg.repeats).map(move |r| (e, r)))
        .collect();
    let outcomes: Vec<Result<RepeatOutcome>> = jobs
        .par_iter()
        .map(|&(e, r)| run_repeat(cfg, &setup, r, e))
        .collect();

    let mut intervals = Vec::new();
    let mut failures = Vec::new();
    let mut runtimes = Vec::new();
    for (&(epsilon, repeat), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                intervals.extend(o.records);
                runtimes.push(RuntimeRecord {
                    epsilon,
                    repeat,
                    seconds: o.seconds,
                });
            }
            Err(e) => failures.push(FailureRecord {
                epsilon,
                repeat,
                error: e.to_string(),
            }),
        }
    }

    let mut coverage = Vec::new();
    let mut widths = Vec::new();
    for &epsilon in &cfg.epsilons {
        for (name, _) in &setup.targets {
            for &level in &cfg.levels {
                let recs: Vec<&IntervalRecord> = intervals
                    .iter()
                    .filter(|r| r.epsilon == epsilon && &r.coefficient == name && r.level == level)
                    .collect();
                if recs.is_empty() {
                    continue;
                }
                let k = recs.len() as f64;
                coverage.push(CoverageRecord {
                    epsilon,
                    coefficient: name.clone(),
                    level,
                    coverage: recs.iter().filter(|r| r.covered).count() as f64 / k,
                    repeats: recs.len(),
                    mean_dropped_fraction: recs.iter().map(|r| r.dropped_fraction).sum::<f64>() / k,
                });
                widths.push(WidthRecord {
                    epsilon,
                    coefficient: name.clone(),
                    level,
                    median_width: median(recs.iter().map(|r| r.hi - r.lo).collect()),
                    median_width_ratio: median(recs.iter().map(|r| r.width_ratio).collect()),
                });
            }
        }
    }

    Ok(ExperimentReport {
        scenario: cfg.scenario,
        mode: cfg.mode,
        epsilons: cfg.epsilons.clone(),
        levels: cfg.levels.clone(),
        repeats: cfg.repeats,
        intervals,
        coverage,
        widths,
        failures,
        runtimes,
    })
}

/// Writes `coverage.csv`, `width_ratio.csv` and `intervals.csv` (the latter
/// for `strip_epsilon`, the first privacy level by default) into `dir`.
pub fn emit_plot_data(report: &ExperimentReport, dir: &Path, strip_epsilon: Option<f64>) -> Result<Vec<PathBuf>> {
    if report.epsilons.is_empty() {
        return Err(Error::Config("report has no privacy levels".into()));
    }
    let strip = strip_epsilon.unwrap_or(report.epsilons[0]);
    if !report.epsilons.contains(&strip) {
        return Err(Error::Config(format!("privacy level {strip} not in the report")));
    }
    fs::create_dir_all(dir)?;
    let mode = report.mode.name();

    let coverage_path = dir.join("coverage.csv");
    let mut w = csv::Writer::from_path(&coverage_path)?;
    w.write_record(["mode", "epsilon", "coefficient", "level", "coverage", "repeats", "mean_dropped_fraction"])?;
    for c in &report.coverage {
        w.write_record([
            mode.to_string(),
            c.epsilon.to_string(),
            c.coefficient.clone(),
            c.level.to_string(),
            c.coverage.to_string(),
            c.repeats.to_string(),
            c.mean_dropped_fraction.to_string(),
        ])?;
    }
    w.flush()?;

    let width_path = dir.join("width_ratio.csv");
    let mut w = csv::Writer::from_path(&width_path)?;
    w.write_record(["mode", "epsilon", "coefficient", "level", "median_width", "median_width_ratio"])?;
    for r in &report.widths {
        w.write_record([
            mode.to_string(),
            r.epsilon.to_string(),
            r.coefficient.clone(),
            r.level.to_string(),
            r.median_width.to_string(),
            r.median_width_ratio.to_string(),
        ])?;
    }
    w.flush()?;

    let strip_path = dir.join("intervals.csv");
    let mut w = csv::Writer::from_path(&strip_path)?;
    w.write_record(["mode", "epsilon", "repeat", "coefficient", "level", "lo", "hi", "truth", "covered"])?;
    for r in report.intervals.iter().filter(|r| r.epsilon == strip) {
        w.write_record([
            mode.to_string(),
            r.epsilon.to_string(),
            r.repeat.to_string(),
            r.coefficient.clone(),
            r.level.to_string(),
            r.lo.to_string(),
            r.hi.to_string(),
            r.truth.to_string(),
            r.covered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![coverage_path, width_path, strip_path])
}
