//! End-to-end generation, multiple-imputation analysis and the coverage
//! experiment harness.

mod experiment;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    combine_estimates, drop_outlier_variances, logistic_fit_spec, report, AnalysisResult, CoefficientReport,
    CombinedEstimate, Estimates, LogisticSpec, VarianceMethod, DEFAULT_VARIANCE_THRESHOLD,
};
use crate::error::{Error, Result, StageExt};
use crate::inference::{laplace_fit, nuts_sample, LaplaceApprox, LaplaceOptions, NoiseAwarePosterior, NutsConfig, PosteriorSamples};
use crate::med::{Backend, Engine};
use crate::privacy::{release, NoisyRelease, PrivacyBudget};
use crate::queries::{scopes_from_names, QueryCollection};
use crate::rng::{derive_seed, stage};
use crate::schema::{
    load_csv, sample_toy_data, toy_schema, Dataset, MissingPolicy, RowSource, Schema, DEFAULT_ENUMERATION_CAP,
};

pub use experiment::{
    emit_plot_data, run_coverage_experiment, CoverageRecord, ExperimentConfig, ExperimentReport, FailureRecord,
    IntervalRecord, Mode, Scenario, WidthRecord, COVERAGE_LEVELS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_missing")]
        missing: MissingPolicy,
    },
    /// The three-variable logistic toy generator.
    Toy { n: usize },
}

fn default_missing() -> MissingPolicy {
    MissingPolicy::Error
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum InferenceMethod {
    Laplace,
    Nuts {
        #[serde(default)]
        config: NutsConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSpec {
    pub regression: LogisticSpec,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Variance threshold for dropping estimates; `None` keeps everything.
    #[serde(default = "default_drop")]
    pub drop_threshold: Option<f64>,
}

fn default_levels() -> Vec<f64> {
    vec![0.95]
}

fn default_drop() -> Option<f64> {
    Some(DEFAULT_VARIANCE_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Schema JSON; the toy schema when absent and the data is the toy generator.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    pub data: DataSource,
    /// Scopes of the full marginal sets, as variable names. Defaults to the
    /// single full-domain scope for the toy data.
    #[serde(default)]
    pub queries: Vec<Vec<String>>,
    pub epsilon: f64,
    pub delta: f64,
    pub m: usize,
    /// Rows per synthetic dataset; the original size when absent.
    #[serde(default)]
    pub n_syn: Option<usize>,
    #[serde(default = "default_inference")]
    pub inference: InferenceMethod,
    #[serde(default)]
    pub backend: Option<Backend>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub downstream: Option<DownstreamSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_inference() -> InferenceMethod {
    InferenceMethod::Laplace
}

impl PipelineConfig {
    pub fn toy(n: usize, epsilon: f64, m: usize, seed: u64) -> Self {
        PipelineConfig {
            schema: None,
            data: DataSource::Toy { n },
            queries: Vec::new(),
            epsilon,
            delta: 1.0 / (n as f64).powi(2),
            m,
            n_syn: None,
            inference: InferenceMethod::Laplace,
            backend: None,
            seed,
            downstream: None,
            output_dir: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        PrivacyBudget::new(self.epsilon, self.delta)?;
        if self.m == 0 {
            return Err(Error::Config("at least one synthetic dataset is required".into()));
        }
        if self.downstream.is_some() && self.m < 2 {
            return Err(Error::Config(format!(
                "combining analyses needs at least two synthetic datasets, got m = {}",
                self.m
            )));
        }
        if self.n_syn == Some(0) {
            return Err(Error::Config("synthetic datasets must have at least one row".into()));
        }
        if let DataSource::Toy { n } = self.data {
            if n == 0 {
                return Err(Error::Config("toy data size must be positive".into()));
            }
            if self.schema.is_some() {
                return Err(Error::Config("toy data uses its own schema; drop the schema path".into()));
            }
        } else if self.schema.is_none() {
            return Err(Error::Config("a schema is required for CSV data".into()));
        }
        if let InferenceMethod::Nuts { config } = &self.inference {
            config.validate()?;
        }
        if let Some(d) = &self.downstream {
            if d.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) || d.levels.is_empty() {
                return Err(Error::Config("confidence levels must lie in (0, 1)".into()));
            }
            if d.regression.reg_lambda < 0.0 {
                return Err(Error::Config("regularisation must be non-negative".into()));
            }
        }
        Ok(())
    }

    fn load_schema(&self) -> Result<Schema> {
        match &self.schema {
            Some(path) => Schema::from_json_file(path),
            None => Ok(toy_schema()),
        }
    }

    fn scopes(&self, schema: &Schema) -> Result<Vec<Vec<usize>>> {
        if self.queries.is_empty() {
            if matches!(self.data, DataSource::Toy { .. }) {
                return Ok(vec![(0..schema.len()).collect()]);
            }
            return Err(Error::Config("no query scopes given".into()));
        }
        scopes_from_names(schema, &self.queries)
    }
}

/// What the pipeline learned about the data-generating distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArtifact {
    pub laplace: LaplaceApprox,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nuts: Option<PosteriorSamples>,
    /// Parameter vectors used for the synthetic datasets.
    pub draws: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub n_syn: usize,
    pub m: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub backend: Backend,
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub schema: Schema,
    pub queries: QueryCollection,
    pub release: NoisyRelease,
    /// Size of the original data, treated as public.
    pub n: usize,
    pub backend: Backend,
    pub posterior: PosteriorArtifact,
    pub datasets: Vec<Dataset>,
    pub analysis: Option<MiOutcome>,
}

/// The only stage that sees the data. The source is consumed, so nothing
/// later in the run can read it.
pub fn private_release<R: RowSource>(
    source: R,
    queries: &QueryCollection,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<(NoisyRelease, usize)> {
    let n = source.n_rows();
    if n == 0 {
        return Err(Error::Config("the data has no rows".into()));
    }
    let counts = queries.evaluate_rows(&source);
    drop(source);
    Ok((release(queries, &counts, budget, seed)?, n))
}

/// Canonical query collection for `scopes`.
pub fn build_queries(schema: &Schema, scopes: &[Vec<usize>]) -> Result<QueryCollection> {
    QueryCollection::from_full_sets(schema, scopes)?.canonicalize(schema)
}

/// Posterior draws `theta_1..theta_m` from a release.
pub fn fit_posterior(
    engine: std::sync::Arc<Engine>,
    queries: &QueryCollection,
    release: &NoisyRelease,
    n: usize,
    inference: &InferenceMethod,
    m: usize,
    seed: u64,
) -> Result<PosteriorArtifact> {
    let post = NoiseAwarePosterior::with_engine(engine, queries, release, n)?;
    let laplace = laplace_fit(&post, &LaplaceOptions::default(), derive_seed(seed, &[stage::LAPLACE]))?;
    match inference {
        InferenceMethod::Laplace => {
            let draws = laplace.sample(m, derive_seed(seed, &[stage::POSTERIOR_DRAW]))?;
            Ok(PosteriorArtifact {
                laplace,
                nuts: None,
                draws,
            })
        }
        InferenceMethod::Nuts { config } => {
            let samples = nuts_sample(&post, &laplace, config, derive_seed(seed, &[stage::NUTS]))?;
            let draws = samples.thin(m);
            Ok(PosteriorArtifact {
                laplace,
                nuts: Some(samples),
                draws,
            })
        }
    }
}

/// One synthetic dataset per parameter vector.
pub fn synthesize(engine: &Engine, draws: &[Vec<f64>], n_syn: usize, seed: u64) -> Result<Vec<Dataset>> {
    draws
        .par_iter()
        .enumerate()
        .map(|(i, theta)| engine.sample(theta, n_syn, derive_seed(seed, &[stage::SYNTHETIC, i as u64])))
        .collect()
}

/// Runs the generation pipeline on `config`, loading the data it names.
pub fn run_napsu_mq(config: &PipelineConfig, observer: &mut dyn FnMut(&'static str)) -> Result<Generation> {
    config.validate().stage("config")?;
    observer("config");
    let schema = config.load_schema().stage("schema")?;
    observer("schema");
    let data = match &config.data {
        DataSource::Csv { path, missing } => load_csv(path, &schema, *missing),
        DataSource::Toy { n } => Ok(sample_toy_data(*n, derive_seed(config.seed, &[stage::TOY_DATA]))),
    }
    .stage("load")?;
    observer("load");
    run_with_source(config, schema, data, observer)
}

/// Runs the pipeline on an already loaded data source. The source moves into
/// the release stage and is gone afterwards.
pub fn run_with_source<R: RowSource>(
    config: &PipelineConfig,
    schema: Schema,
    source: R,
    observer: &mut dyn FnMut(&'static str),
) -> Result<Generation> {
    config.validate().stage("config")?;
    if source.schema() != &schema {
        return Err(Error::Schema("data does not follow the configured schema".into()).at("load"));
    }
    let scopes = config.scopes(&schema).stage("queries")?;
    let queries = build_queries(&schema, &scopes).stage("queries")?;
    observer("queries");

    let budget = PrivacyBudget::new(config.epsilon, config.delta).stage("release")?;
    let (release, n) =
        private_release(source, &queries, budget, derive_seed(config.seed, &[stage::NOISE])).stage("release")?;
    observer("release");

    let backend = config
        .backend
        .unwrap_or_else(|| Backend::auto(&schema, DEFAULT_ENUMERATION_CAP));
    let engine = std::sync::Arc::new(Engine::new(&schema, &queries, backend).stage("inference")?);
    let posterior = fit_posterior(engine.clone(), &queries, &release, n, &config.inference, config.m, config.seed)
        .stage("inference")?;
    observer("inference");

    let n_syn = config.n_syn.unwrap_or(n);
    let datasets = synthesize(&engine, &posterior.draws, n_syn, config.seed).stage("synthesis")?;
    observer("synthesis");

    let analysis = match &config.downstream {
        Some(spec) => Some(run_mi_analysis(&datasets, spec, n).stage("analysis")?),
        None => None,
    };
    if analysis.is_some() {
        observer("analysis");
    }

    let generation = Generation {
        schema,
        queries,
        release,
        n,
        backend,
        posterior,
        datasets,
        analysis,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(&generation, config, dir).stage("output")?;
        observer("output");
    }
    Ok(generation)
}

fn to_pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_outputs(g: &Generation, config: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("synthetic"))?;
    g.schema.to_json_file(&dir.join("schema.json"))?;
    fs::write(dir.join("queries.json"), to_pretty(&g.queries.to_json())?)?;
    fs::write(dir.join("release.json"), g.release.to_json_string() + "\n")?;
    let summary = PosteriorArtifact {
        laplace: g.posterior.laplace.clone(),
        nuts: None,
        draws: g.posterior.draws.clone(),
    };
    fs::write(dir.join("posterior.json"), to_pretty(&summary)?)?;
    if let Some(samples) = &g.posterior.nuts {
        samples.write_csv(&dir.join("samples.csv"))?;
        samples.write_diagnostics(&dir.join("diagnostics.json"))?;
    }
    let width = g.datasets.len().saturating_sub(1).to_string().len().max(3);
    let mut names = Vec::with_capacity(g.datasets.len());
    for (i, d) in g.datasets.iter().enumerate() {
        let name = format!("synthetic/syn_{i:0width$}.csv");
        d.write_csv(&dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest {
        n: g.n,
        n_syn: g.datasets.first().map_or(0, Dataset::n_rows),
        m: g.datasets.len(),
        epsilon: config.epsilon,
        delta: config.delta,
        seed: config.seed,
        backend: g.backend,
        datasets: names,
    };
    fs::write(dir.join("manifest.json"), to_pretty(&manifest)?)?;
    if let Some(a) = &g.analysis {
        fs::write(dir.join("analysis.json"), to_pretty(&a.intervals)?)?;
    }
    Ok(())
}

/// Reads the synthetic datasets listed in a generation output directory.
pub fn load_generation(dir: &Path) -> Result<(Manifest, Vec<Dataset>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let schema = Schema::from_json_file(&dir.join("schema.json"))?;
    let datasets = manifest
        .datasets
        .iter()
        .map(|name| load_csv(&dir.join(name), &schema, MissingPolicy::Error))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, datasets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiOutcome {
    pub results: Vec<AnalysisResult>,
    pub combined: CombinedEstimate,
    pub intervals: Vec<CoefficientReport>,
}

/// Fits the downstream regression on every dataset and combines the results.
pub fn run_mi_analysis(datasets: &[Dataset], spec: &DownstreamSpec, n: usize) -> Result<MiOutcome> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "combining analyses needs at least two datasets, got {}",
            datasets.len()
        )));
    }
    let n_syn = datasets[0].n_rows();
    let results: Vec<AnalysisResult> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut s = spec.regression.clone();
            if let VarianceMethod::Bootstrap { resamples, seed } = s.variance {
                s.variance = VarianceMethod::Bootstrap {
                    resamples,
                    seed: derive_seed(seed, &[stage::BOOTSTRAP, i as u64]),
                };
            }
            logistic_fit_spec(d, &s)
        })
        .collect::<Result<_>>()?;
    let estimates = match spec.drop_threshold {
        Some(t) => drop_outlier_variances(&results, t)?,
        None => Estimates::from_results(&results)?,
    };
    let combined = combine_estimates(&estimates, n_syn, n)?;
    let intervals = report(&combined, &spec.levels)?;
    Ok(MiOutcome {
        results,
        combined,
        intervals,
    })
}
