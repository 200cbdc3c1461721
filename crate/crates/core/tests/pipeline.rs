use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use napsu_core::analysis::{LogisticSpec, VarianceMethod};
use napsu_core::inference::NutsConfig;
use napsu_core::pipeline::{
    emit_plot_data, load_generation, run_coverage_experiment, run_mi_analysis, run_napsu_mq, run_with_source,
    DataSource, DownstreamSpec, ExperimentConfig, InferenceMethod, Mode, PipelineConfig,
};
use napsu_core::schema::{sample_toy_data, toy_schema, Dataset, RowSource, Schema};
use napsu_core::Error;

struct CountingSource {
    inner: Dataset,
    reads: Arc<AtomicUsize>,
}

impl RowSource for CountingSource {
    fn schema(&self) -> &Schema {
        self.inner.schema()
    }

    fn n_rows(&self) -> usize {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.n_rows()
    }

    fn row(&self, i: usize) -> &[u32] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.inner.row(i)
    }
}

fn toy_downstream() -> DownstreamSpec {
    DownstreamSpec {
        regression: LogisticSpec {
            dependent: "x3".into(),
            independents: vec!["x1".into(), "x2".into()],
            reg_lambda: 0.0,
            variance: VarianceMethod::ObservedInformation,
        },
        levels: vec![0.9, 0.95],
        drop_threshold: Some(1e3),
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn data_is_not_read_after_the_release() {
    let reads = Arc::new(AtomicUsize::new(0));
    let source = CountingSource {
        inner: sample_toy_data(500, 3),
        reads: reads.clone(),
    };
    let mut config = PipelineConfig::toy(500, 1.0, 5, 9);
    config.downstream = Some(toy_downstream());
    let mut seen = Vec::new();
    let mut observer = |stage: &'static str| seen.push((stage, reads.load(Ordering::SeqCst)));
    let g = run_with_source(&config, toy_schema(), source, &mut observer).unwrap();

    let at_release = seen.iter().find(|(s, _)| *s == "release").unwrap().1;
    assert!(at_release >= 500);
    assert_eq!(seen.iter().find(|(s, _)| *s == "queries").unwrap().1, 0);
    for (stage, count) in &seen {
        if !matches!(*stage, "config" | "queries") {
            assert_eq!(*count, at_release, "data read during {stage}");
        }
    }
    assert_eq!(reads.load(Ordering::SeqCst), at_release);
    assert_eq!(g.n, 500);
    assert_eq!(g.datasets.len(), 5);
}

#[test]
fn toy_run_writes_posterior_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::toy(2000, 0.5, 100, 1);
    config.output_dir = Some(dir.path().to_path_buf());
    config.downstream = Some(toy_downstream());
    let g = run_napsu_mq(&config, &mut |_| {}).unwrap();
    assert_eq!(g.datasets.len(), 100);
    assert!(g.datasets.iter().all(|d| d.n_rows() == 2000));
    assert!(dir.path().join("posterior.json").exists());
    assert!(dir.path().join("release.json").exists());
    assert!(dir.path().join("synthetic/syn_099.csv").exists());

    let a = g.analysis.as_ref().unwrap();
    let x1 = a.intervals.iter().find(|r| r.name == "x1" && r.level == 0.95).unwrap();
    let x2 = a.intervals.iter().find(|r| r.name == "x2" && r.level == 0.95).unwrap();
    for (r, truth) in [(x1, 1.0), (x2, 0.0)] {
        assert!((r.q_bar - truth).abs() < 3.0 * r.t_star.sqrt(), "{r:?}");
        assert!(r.ci_lo.is_finite() && r.ci_hi.is_finite() && r.ci_lo < r.q_bar && r.q_bar < r.ci_hi);
    }

    let (manifest, datasets) = load_generation(dir.path()).unwrap();
    assert_eq!(manifest.m, 100);
    assert_eq!(manifest.n, 2000);
    assert_eq!(datasets, g.datasets);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::toy(800, 1.0, 4, seed);
        config.output_dir = Some(dir.path().to_path_buf());
        config.downstream = Some(toy_downstream());
        run_napsu_mq(&config, &mut |_| {}).unwrap();
        let tree = read_tree(dir.path());
        (dir, tree)
    };
    let (_a, first) = run(5);
    let (_b, second) = run(5);
    let (_c, other) = run(6);
    assert!(first.len() >= 9);
    assert_eq!(first, second);
    assert_ne!(first["release.json"], other["release.json"]);
}

#[test]
fn nuts_run_writes_draws_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::toy(1000, 1.0, 10, 2);
    config.inference = InferenceMethod::Nuts {
        config: NutsConfig {
            chains: 2,
            warmup: 150,
            samples: 200,
            ..NutsConfig::default()
        },
    };
    config.output_dir = Some(dir.path().to_path_buf());
    let g = run_napsu_mq(&config, &mut |_| {}).unwrap();
    let samples = g.posterior.nuts.as_ref().unwrap();
    assert_eq!(samples.n_draws(), 400);
    assert_eq!(g.posterior.draws.len(), 10);
    assert_eq!(g.posterior.draws[1], samples.draws[40]);
    assert!(dir.path().join("samples.csv").exists());
    assert!(dir.path().join("diagnostics.json").exists());
}

#[test]
fn single_dataset_with_analysis_fails_before_any_work() {
    let mut config = PipelineConfig::toy(2000, 0.5, 1, 1);
    config.downstream = Some(toy_downstream());
    let mut stages = Vec::new();
    let err = run_napsu_mq(&config, &mut |s| stages.push(s)).unwrap_err();
    assert!(stages.is_empty());
    assert!(matches!(err.root(), Error::Config(_)));
    assert!(!err.is_numeric());
    assert!(err.to_string().starts_with("config:"));
}

#[test]
fn errors_carry_the_stage() {
    let config = PipelineConfig {
        schema: Some("/nonexistent/schema.json".into()),
        data: DataSource::Csv {
            path: "/nonexistent/data.csv".into(),
            missing: napsu_core::schema::MissingPolicy::Error,
        },
        ..PipelineConfig::toy(10, 1.0, 2, 0)
    };
    let err = run_napsu_mq(&config, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "schema", .. }), "{err}");

    let mut bad = PipelineConfig::toy(100, 1.0, 2, 0);
    bad.queries = vec![vec!["x1".into(), "nope".into()]];
    let err = run_napsu_mq(&bad, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "queries", .. }), "{err}");
}

#[test]
fn csv_data_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = sample_toy_data(600, 4);
    data.write_csv(&dir.path().join("data.csv")).unwrap();
    toy_schema().to_json_file(&dir.path().join("schema.json")).unwrap();
    let config = PipelineConfig {
        schema: Some(dir.path().join("schema.json")),
        data: DataSource::Csv {
            path: dir.path().join("data.csv"),
            missing: napsu_core::schema::MissingPolicy::Error,
        },
        queries: vec![vec!["x1".into(), "x3".into()], vec!["x2".into(), "x3".into()]],
        ..PipelineConfig::toy(600, 1.0, 3, 8)
    };
    let g = run_napsu_mq(&config, &mut |_| {}).unwrap();
    assert_eq!(g.n, 600);
    assert_eq!(g.queries.len(), 5);
    assert_eq!(g.release.sensitivity, 2.0);
}

#[test]
fn identical_datasets_take_the_negative_t_branch() {
    let d = sample_toy_data(1000, 8);
    let datasets = vec![d.clone(), d.clone(), d];
    let out = run_mi_analysis(&datasets, &toy_downstream(), 4000).unwrap();
    for j in 0..out.combined.names.len() {
        assert_eq!(out.combined.b[j], 0.0);
        assert!((out.combined.t_star[j] - 0.25 * out.combined.v_bar[j]).abs() < 1e-15);
    }
}

#[test]
fn separated_dataset_is_dropped() {
    let mut datasets: Vec<Dataset> = (0..4).map(|s| sample_toy_data(400, 20 + s)).collect();
    let rows: Vec<Vec<u32>> = (0..400u32).map(|i| vec![i % 2, (i / 2) % 2, i % 2]).collect();
    datasets.push(Dataset::from_rows(toy_schema(), rows).unwrap());
    let out = run_mi_analysis(&datasets, &toy_downstream(), 400).unwrap();
    assert!(!out.results[4].converged);
    let x1 = out.intervals.iter().find(|r| r.name == "x1").unwrap();
    assert_eq!(x1.m_used, 4);
    assert!((x1.dropped_fraction - 0.2).abs() < 1e-12);

    let mut keep_all = toy_downstream();
    keep_all.drop_threshold = None;
    let wide = run_mi_analysis(&datasets, &keep_all, 400).unwrap();
    assert_eq!(wide.combined.m_used[1], 5);
    assert!(run_mi_analysis(&datasets[..1], &toy_downstream(), 400).is_err());
}

#[test]
fn experiment_repeats_are_stable_and_coverage_is_monotone() {
    let small = run_coverage_experiment(&ExperimentConfig::toy(3, vec![1.0], Mode::NaMi, 4)).unwrap();
    let large = run_coverage_experiment(&ExperimentConfig::toy(6, vec![1.0], Mode::NaMi, 4)).unwrap();
    let head: Vec<_> = large.intervals.iter().filter(|r| r.repeat < 3).cloned().collect();
    assert_eq!(small.intervals, head);

    let report = run_coverage_experiment(&ExperimentConfig::toy(30, vec![0.5], Mode::NaMi, 11)).unwrap();
    assert!(report.failures.is_empty());
    assert_eq!(report.intervals.len(), 30 * 2 * 7);
    for c in ["x1", "x2"] {
        let covs: Vec<f64> = report.levels.iter().map(|&l| report.coverage_at(0.5, c, l).unwrap()).collect();
        assert!(covs.windows(2).all(|w| w[1] >= w[0] - 0.02), "{covs:?}");
        assert!(covs.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn every_mode_runs() {
    for mode in Mode::ALL {
        let mut cfg = ExperimentConfig::toy(2, vec![1.0], mode, 3);
        cfg.m = 5;
        let r = run_coverage_experiment(&cfg).unwrap();
        assert!(r.failures.is_empty(), "{mode:?}: {:?}", r.failures);
        assert_eq!(r.intervals.len(), 2 * 2 * 7);
        assert!(r.widths.iter().all(|w| w.median_width_ratio > 0.0));
    }
    let mut bad = ExperimentConfig::toy(2, vec![1.0], Mode::NaMi, 3);
    bad.m = 1;
    assert!(run_coverage_experiment(&bad).is_err());
    assert!(run_coverage_experiment(&ExperimentConfig::toy(2, vec![], Mode::NaMi, 3)).is_err());
}

#[test]
fn plot_tables() {
    let mut report = run_coverage_experiment(&ExperimentConfig::toy(4, vec![0.5, 1.0], Mode::NaMi, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plot_data(&report, dir.path(), None).unwrap();
    assert_eq!(files.len(), 3);
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    let header = String::from_utf8(first[0].clone()).unwrap();
    assert!(header.starts_with("mode,epsilon,coefficient,level,coverage"));
    assert!(String::from_utf8(first[2].clone()).unwrap().lines().skip(1).all(|l| l.contains(",0.5,")));
    emit_plot_data(&report, dir.path(), None).unwrap();
    let again: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(first, again);
    assert!(emit_plot_data(&report, dir.path(), Some(0.3)).is_err());
    report.epsilons.clear();
    assert!(emit_plot_data(&report, dir.path(), None).is_err());
}
