use impspec::cbo::PriorKind;
use impspec::experiments::output::{emit_outputs, read_rows_csv, EmitStatus};
use impspec::experiments::{
    aggregate, benchmark_oracle, run_benchmark, run_cbo_trial, trial_seed, BenchmarkBundle,
    BenchmarkConfig, ExperimentName, TrialRow,
};
use impspec::gp::AdamConfig;
use impspec::simulators::OracleValues;

fn small(experiment: ExperimentName, trials: usize) -> BenchmarkConfig {
    let mut c = BenchmarkConfig::new(experiment, trials, 3);
    c.n = 30;
    c.adam = AdamConfig {
        iterations: 15,
        ..AdamConfig::default()
    };
    c.n_boot = 3;
    c.outer_boot = 5;
    c.omegas = vec![0.25, 1.0, 4.0];
    c.oracle_mc = 2000;
    c.grid_size = 20;
    c.sampling_gp_samples = 10;
    c.bo_iters = 3;
    c
}

#[test]
fn single_trial_has_zero_spread() {
    let b = run_benchmark(&small(ExperimentName::Ablation, 1), 1).unwrap();
    assert!(!b.aggregates.is_empty());
    for a in &b.aggregates {
        assert_eq!(a.n, 1);
        assert_eq!(a.std, 0.0);
    }
    assert!(b.calibration.is_empty());
    assert_eq!(b.trial_seeds, vec![trial_seed(3, 0)]);
}

#[test]
fn ablation_runs_are_reproducible_across_thread_counts() {
    let cfg = small(ExperimentName::Ablation, 2);
    let a = run_benchmark(&cfg, 1).unwrap();
    let b = run_benchmark(&cfg, 2).unwrap();
    assert_eq!(a, b);
    for m in ["impspec", "impspec_nocal", "bayesimp", "sampling_gp"] {
        assert_eq!(a.values(m, "rmse").len(), 2, "{m}");
        assert!(a.calibration_error(m, "all").is_some(), "{m}");
    }
}

#[test]
fn synthetic_run_reports_collapse_metrics() {
    let b = run_benchmark(&small(ExperimentName::Synthetic, 2), 1).unwrap();
    for (m, metric) in [
        ("impspec", "ood_var_over_s3"),
        ("impspec", "rmse_id"),
        ("bayesimp", "ood_var_ratio"),
    ] {
        assert_eq!(b.values(m, metric).len(), 2, "{m} {metric}");
    }
    for subset in ["id", "ood"] {
        assert!(b.calibration_error("impspec", subset).is_some());
        assert!(b.calibration_error("bayesimp", subset).is_some());
    }
}

#[test]
fn healthcare_cbo_run_records_traces() {
    let cfg = small(ExperimentName::HealthcareCbo, 2);
    let b = run_benchmark(&cfg, 1).unwrap();
    assert_eq!(b.traces.len(), 8);
    for t in &b.traces {
        assert_eq!(t.trace.xs.len(), cfg.bo_iters);
        assert!(t.trace.regret.iter().all(|r| *r >= 0.0));
    }
    for m in ["impspec", "bayesimp", "cbo", "bo"] {
        assert_eq!(b.values(m, "cumulative_regret").len(), 2);
    }
}

#[test]
fn cbo_trial_resumes() {
    let cfg = small(ExperimentName::HealthcareCbo, 1);
    let oracle = benchmark_oracle(&cfg).unwrap();
    let mut longer = cfg.clone();
    longer.bo_iters = 5;
    let full = run_cbo_trial(&longer, &oracle, PriorKind::Plain, 0, None).unwrap();
    let first = run_cbo_trial(&cfg, &oracle, PriorKind::Plain, 0, None).unwrap();
    let mut rest_cfg = cfg.clone();
    rest_cfg.bo_iters = 2;
    let rest = run_cbo_trial(&rest_cfg, &oracle, PriorKind::Plain, 0, Some(&first)).unwrap();
    assert_eq!(full, rest);
}

#[test]
fn config_hash_tracks_every_field() {
    let base = small(ExperimentName::Ablation, 2);
    assert_eq!(base.hash(), base.clone().hash());
    let mut variants: Vec<BenchmarkConfig> = Vec::new();
    let mut push = |f: &dyn Fn(&mut BenchmarkConfig)| {
        let mut c = base.clone();
        f(&mut c);
        variants.push(c);
    };
    push(&|c| c.experiment = ExperimentName::Synthetic);
    push(&|c| c.trials += 1);
    push(&|c| c.seed += 1);
    push(&|c| c.n += 1);
    push(&|c| c.adam.iterations += 1);
    push(&|c| c.adam.learning_rate *= 2.0);
    push(&|c| c.n_boot += 1);
    push(&|c| c.outer_boot += 1);
    push(&|c| c.omegas.push(16.0));
    push(&|c| {
        c.alphas.pop();
    });
    push(&|c| c.oracle_mc += 1);
    push(&|c| c.grid_size += 1);
    push(&|c| c.sampling_gp_samples += 1);
    push(&|c| c.bo_iters += 1);
    push(&|c| c.refit_every += 1);
    push(&|c| c.opt_varsigma = !c.opt_varsigma);
    push(&|c| c.refit_boot = !c.refit_boot);
    push(&|c| c.propensity = impspec::simulators::PropensityMode::Continuous);
    let mut hashes: Vec<String> = variants.iter().map(|c| c.hash()).collect();
    hashes.push(base.hash());
    let n = hashes.len();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), n);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small(ExperimentName::Ablation, 1);
    c.n = 2;
    assert!(run_benchmark(&c, 1).is_err());
    let mut c = small(ExperimentName::Ablation, 1);
    c.omegas.clear();
    assert!(run_benchmark(&c, 1).is_err());
    assert!("nonsense".parse::<ExperimentName>().is_err());
}

#[test]
fn aggregates_are_mean_and_sample_std() {
    let rows: Vec<TrialRow> = [1.0, 2.0, 4.0]
        .iter()
        .enumerate()
        .map(|(t, v)| TrialRow {
            trial: t,
            method: "m".into(),
            metric: "x".into(),
            value: *v,
        })
        .collect();
    let a = aggregate(&rows);
    assert_eq!(a.len(), 1);
    assert!((a[0].mean - 7.0 / 3.0).abs() < 1e-15);
    assert!((a[0].std - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn outputs_round_trip() {
    let b = run_benchmark(&small(ExperimentName::Ablation, 2), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(emit_outputs(&b, dir.path()).unwrap(), EmitStatus::Complete);
    let rows = read_rows_csv(&dir.path().join("trial_rows.csv")).unwrap();
    assert_eq!(rows.len(), b.rows.len());
    for (r, s) in rows.iter().zip(&b.rows) {
        assert_eq!((r.trial, &r.method, &r.metric), (s.trial, &s.method, &s.metric));
        assert!((r.value - s.value).abs() <= 1e-9 * s.value.abs().max(1.0));
    }
    for f in [
        "manifest.json",
        "aggregates.csv",
        "oracle.csv",
        "curves.csv",
        "calibration_profiles.csv",
        "calibration_summary.csv",
        "bundle.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], b.config_hash.as_str());
    assert_eq!(manifest["trial_seeds"].as_array().unwrap().len(), 2);
}

#[test]
fn empty_bundle_writes_manifest_only() {
    let cfg = small(ExperimentName::Ablation, 1);
    let b = BenchmarkBundle {
        config_hash: cfg.hash(),
        config: cfg,
        trial_seeds: vec![],
        rows: vec![],
        aggregates: vec![],
        calibration: vec![],
        oracle: OracleValues {
            grid: vec![],
            values: vec![],
            stderr: vec![],
        },
        curves: vec![],
        traces: vec![],
        failures: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(emit_outputs(&b, dir.path()).unwrap(), EmitStatus::ManifestOnly);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 1);
    assert!(dir.path().join("manifest.json").exists());
}
