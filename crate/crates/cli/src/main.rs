use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use napsu_core::analysis::{LogisticSpec, VarianceMethod};
use napsu_core::inference::NutsConfig;
use napsu_core::med::Backend;
use napsu_core::pipeline::{
    emit_plot_data, load_generation, run_coverage_experiment, run_mi_analysis, run_napsu_mq, DataSource,
    DownstreamSpec, ExperimentConfig, InferenceMethod, Mode, PipelineConfig,
};
use napsu_core::privacy::{calibrate_sigma, delta_of, PrivacyBudget};
use napsu_core::schema::MissingPolicy;
use napsu_core::{Error, Result};

#[derive(Parser)]
#[command(name = "napsu", version, about = "Differentially private synthetic data with calibrated downstream intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Release noisy marginals, fit the posterior and write synthetic datasets.
    Generate(GenerateArgs),
    /// Fit a logistic regression on each synthetic dataset and combine.
    Analyze(AnalyzeArgs),
    /// Repeated coverage experiment on a known data-generating process.
    Experiment(ExperimentArgs),
    /// Noise scale for a privacy budget and sensitivity.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Laplace,
    Nuts,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Enumeration,
    JunctionTree,
}

#[derive(Clone, Copy, ValueEnum)]
enum MissingArg {
    Error,
    DropRows,
}

#[derive(Args, Default)]
struct RegressionArgs {
    /// Binary dependent variable.
    #[arg(long)]
    dependent: Option<String>,
    /// Comma-separated independent variables.
    #[arg(long, value_delimiter = ',')]
    independents: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    reg_lambda: f64,
    /// Bootstrap resamples for the variance (only used with --reg-lambda > 0).
    #[arg(long, default_value_t = 50)]
    bootstrap: usize,
    /// Comma-separated confidence levels.
    #[arg(long, value_delimiter = ',', default_value = "0.95")]
    levels: Vec<f64>,
    /// Drop estimates whose variance is at least this large.
    #[arg(long, default_value_t = 1e3)]
    drop_threshold: f64,
    /// Keep every estimate regardless of its variance.
    #[arg(long)]
    no_drop: bool,
}

impl RegressionArgs {
    fn spec(&self, seed: u64) -> Option<DownstreamSpec> {
        let dependent = self.dependent.clone()?;
        let variance = if self.reg_lambda > 0.0 {
            VarianceMethod::Bootstrap {
                resamples: self.bootstrap,
                seed,
            }
        } else {
            VarianceMethod::ObservedInformation
        };
        Some(DownstreamSpec {
            regression: LogisticSpec {
                dependent,
                independents: self.independents.clone(),
                reg_lambda: self.reg_lambda,
                variance,
            },
            levels: self.levels.clone(),
            drop_threshold: (!self.no_drop).then_some(self.drop_threshold),
        })
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON configuration; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Schema JSON for CSV data.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "toy_n")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    missing: Option<MissingArg>,
    /// Use the built-in three-variable toy generator with this many rows.
    #[arg(long)]
    toy_n: Option<usize>,
    /// Query scopes: variables separated by commas, scopes by semicolons,
    /// e.g. "a,b;b,c".
    #[arg(long)]
    queries: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Number of synthetic datasets.
    #[arg(long)]
    m: Option<usize>,
    /// Rows per synthetic dataset (defaults to the original size).
    #[arg(long)]
    n_syn: Option<usize>,
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    regression: RegressionArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Output directory of a `generate` run.
    #[arg(long)]
    dir: PathBuf,
    /// Original data size; read from the run's manifest when absent.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the intervals here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    regression: RegressionArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Toy,
    StandIn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NaMi,
    MinusNa,
    MinusMi,
    MinusBoth,
    PgmMleBaseline,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, value_enum, default_value = "toy")]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value = "na-mi")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    /// Comma-separated privacy levels.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    /// Comma-separated nominal levels.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<f64>,
    /// Write the full report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write coverage, width-ratio and interval tables here.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    /// L2 sensitivity; use --full-sets for sqrt(2 * count).
    #[arg(long, conflicts_with = "full_sets")]
    sensitivity: Option<f64>,
    /// Number of full marginal sets released.
    #[arg(long)]
    full_sets: Option<usize>,
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serialises"));
}

fn parse_scopes(s: &str) -> Vec<Vec<String>> {
    s.split(';')
        .filter(|scope| !scope.trim().is_empty())
        .map(|scope| scope.split(',').map(|v| v.trim().to_string()).collect())
        .collect()
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => {
            let data = match (&args.data, args.toy_n) {
                (Some(path), _) => DataSource::Csv {
                    path: path.clone(),
                    missing: MissingPolicy::Error,
                },
                (None, Some(n)) => DataSource::Toy { n },
                (None, None) => return Err(Error::Config("give --config, --data or --toy-n".into())),
            };
            let epsilon = args.epsilon.ok_or_else(|| Error::Config("--epsilon is required".into()))?;
            let n_hint = match data {
                DataSource::Toy { n } => Some(n),
                DataSource::Csv { .. } => None,
            };
            let delta = match (args.delta, n_hint) {
                (Some(d), _) => d,
                (None, Some(n)) => 1.0 / (n as f64).powi(2),
                (None, None) => return Err(Error::Config("--delta is required for CSV data".into())),
            };
            PipelineConfig {
                schema: None,
                data,
                queries: Vec::new(),
                epsilon,
                delta,
                m: args.m.unwrap_or(100),
                n_syn: None,
                inference: InferenceMethod::Laplace,
                backend: None,
                seed: 0,
                downstream: None,
                output_dir: None,
            }
        }
    };
    if let Some(s) = &args.schema {
        config.schema = Some(s.clone());
    }
    if let Some(missing) = args.missing {
        if let DataSource::Csv { missing: m, .. } = &mut config.data {
            *m = match missing {
                MissingArg::Error => MissingPolicy::Error,
                MissingArg::DropRows => MissingPolicy::DropRows,
            };
        }
    }
    if let Some(q) = &args.queries {
        config.queries = parse_scopes(q);
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    if let Some(d) = args.delta {
        config.delta = d;
    }
    if let Some(m) = args.m {
        config.m = m;
    }
    if args.n_syn.is_some() {
        config.n_syn = args.n_syn;
    }
    let nuts_overrides = args.chains.is_some() || args.warmup.is_some() || args.samples.is_some();
    match args.inference {
        Some(InferenceArg::Laplace) => config.inference = InferenceMethod::Laplace,
        Some(InferenceArg::Nuts) => {
            if !matches!(config.inference, InferenceMethod::Nuts { .. }) {
                config.inference = InferenceMethod::Nuts {
                    config: NutsConfig::default(),
                };
            }
        }
        None => {}
    }
    if let InferenceMethod::Nuts { config: nuts } = &mut config.inference {
        if let Some(c) = args.chains {
            nuts.chains = c;
        }
        if let Some(w) = args.warmup {
            nuts.warmup = w;
        }
        if let Some(s) = args.samples {
            nuts.samples = s;
        }
    } else if nuts_overrides {
        return Err(Error::Config("--chains, --warmup and --samples need --inference nuts".into()));
    }
    if let Some(b) = args.backend {
        config.backend = Some(match b {
            BackendArg::Enumeration => Backend::Enumeration,
            BackendArg::JunctionTree => Backend::JunctionTree,
        });
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = &args.output_dir {
        config.output_dir = Some(d.clone());
    }
    if let Some(spec) = args.regression.spec(config.seed) {
        config.downstream = Some(spec);
    }

    let g = run_napsu_mq(&config, &mut |stage| eprintln!("done: {stage}"))?;
    print_json(&json!({
        "n": g.n,
        "m": g.datasets.len(),
        "n_syn": g.datasets.first().map_or(0, |d| d.n_rows()),
        "queries": g.queries.len(),
        "sigma_dp": g.release.sigma_dp,
        "sensitivity": g.release.sensitivity,
        "backend": g.backend,
        "output_dir": config.output_dir,
        "intervals": g.analysis.as_ref().map(|a| &a.intervals),
    }));
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let spec = args
        .regression
        .spec(args.seed)
        .ok_or_else(|| Error::Config("--dependent is required".into()))?;
    let (manifest, datasets) = load_generation(&args.dir)?;
    let n = args.n.unwrap_or(manifest.n);
    let out = run_mi_analysis(&datasets, &spec, n)?;
    let text = serde_json::to_string_pretty(&out.intervals)? + "\n";
    match &args.output {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let mode = match args.mode {
        ModeArg::NaMi => Mode::NaMi,
        ModeArg::MinusNa => Mode::MinusNa,
        ModeArg::MinusMi => Mode::MinusMi,
        ModeArg::MinusBoth => Mode::MinusBoth,
        ModeArg::PgmMleBaseline => Mode::PgmMleBaseline,
    };
    let mut cfg = match args.scenario {
        ScenarioArg::Toy => ExperimentConfig::toy(args.repeats, args.epsilons.clone(), mode, args.seed),
        ScenarioArg::StandIn => ExperimentConfig::stand_in(args.repeats, args.epsilons.clone(), mode, args.seed),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(m) = args.m {
        cfg.m = m;
    }
    if args.delta.is_some() {
        cfg.delta = args.delta;
    }
    match args.inference {
        Some(InferenceArg::Laplace) => cfg.inference = InferenceMethod::Laplace,
        Some(InferenceArg::Nuts) if !matches!(cfg.inference, InferenceMethod::Nuts { .. }) => {
            cfg.inference = InferenceMethod::Nuts {
                config: NutsConfig::default(),
            }
        }
        _ => {}
    }
    if !args.levels.is_empty() {
        cfg.levels = args.levels.clone();
    }
    let report = run_coverage_experiment(&cfg)?;
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(dir) = &args.plot_dir {
        emit_plot_data(&report, dir, None)?;
    }
    let summary: Vec<_> = report
        .coverage
        .iter()
        .map(|c| {
            let w = report
                .widths
                .iter()
                .find(|w| w.epsilon == c.epsilon && w.coefficient == c.coefficient && w.level == c.level);
            json!({
                "epsilon": c.epsilon,
                "coefficient": c.coefficient,
                "level": c.level,
                "coverage": c.coverage,
                "repeats": c.repeats,
                "median_width": w.map(|w| w.median_width),
                "median_width_ratio": w.map(|w| w.median_width_ratio),
            })
        })
        .collect();
    print_json(&json!({
        "mode": mode.name(),
        "failed_repeats": report.failures.len(),
        "coverage": summary,
    }));
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let sensitivity = match (args.sensitivity, args.full_sets) {
        (Some(s), _) => s,
        (None, Some(k)) => (2.0 * k as f64).sqrt(),
        (None, None) => return Err(Error::Config("give --sensitivity or --full-sets".into())),
    };
    let budget = PrivacyBudget::new(args.epsilon, args.delta)?;
    let sigma = calibrate_sigma(budget, sensitivity)?;
    print_json(&json!({
        "epsilon": args.epsilon,
        "delta": args.delta,
        "sensitivity": sensitivity,
        "sigma": sigma,
        "achieved_delta": delta_of(args.epsilon, sigma, sensitivity)?,
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Analyze(a) => analyze(a),
        Command::Experiment(a) => experiment(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
