use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use impspec::data::{Dataset, Roles, Table};
use impspec::experiments::output::read_rows_csv;
use impspec::experiments::{BenchmarkConfig, ExperimentName};
use impspec::gp::{AdamConfig, FittedModel, ModelParams};
use impspec::kernels::{BaseScale, SpectralMeasure};
use impspec::posterior::{EvalPoint, Posterior};

fn impspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_impspec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = impspec(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim{seed}"));
    ok(&["simulate", "--dgp", "ablation", "--n", "40", "--seed", &seed.to_string(), "--out", s(&out)]);
    out
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), 5);
    let b = dir.path().join("again");
    ok(&["simulate", "--dgp", "ablation", "--n", "40", "--seed", "5", "--out", s(&b)]);
    for f in ["primary.csv", "fusion.csv", "roles.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = simulate(dir.path(), 6);
    assert_ne!(
        std::fs::read(a.join("primary.csv")).unwrap(),
        std::fs::read(c.join("primary.csv")).unwrap()
    );
}

#[test]
fn effect_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), 1);
    let model = dir.path().join("model.json");
    ok(&[
        "fit",
        "--data",
        s(&sim.join("primary.csv")),
        "--fusion",
        s(&sim.join("fusion.csv")),
        "--roles",
        s(&sim.join("roles.json")),
        "--out",
        s(&model),
        "--iters",
        "5",
    ]);
    let roles = Roles::load(&sim.join("roles.json")).unwrap();
    let query = serde_json::json!({ "estimand": "ate", "roles": roles, "fusion": true });
    let query_path = dir.path().join("query.json");
    std::fs::write(&query_path, query.to_string()).unwrap();
    let z = &roles.z[0];
    let points = dir.path().join("points.csv");
    std::fs::write(&points, format!("{z}\n0.5\n")).unwrap();
    let stdout = ok(&[
        "effect",
        "--model",
        s(&model),
        "--query",
        s(&query_path),
        "--points",
        s(&points),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], format!("{z},mean,variance,s1,s2,s3"));
    let fields: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();

    let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let params: ModelParams = serde_json::from_value(file["params"].clone()).unwrap();
    let ds = Dataset::new(
        Table::load(&sim.join("primary.csv")).unwrap(),
        Some(Table::load(&sim.join("fusion.csv")).unwrap()),
        roles,
    )
    .unwrap();
    let fitted = FittedModel::new(ds.problem().unwrap(), params).unwrap();
    let mu = SpectralMeasure::from_points(&fitted.problem.v1, 1.0, BaseScale::Variance).unwrap();
    let m = Posterior::new(&fitted, &mu)
        .unwrap()
        .moments(&EvalPoint::z_only(vec![0.5]))
        .unwrap();
    let expect = [0.5, m.mean, m.variance, m.s1, m.s2, m.s3];
    for (got, want) in fields.iter().zip(expect) {
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn benchmark_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = BenchmarkConfig::new(ExperimentName::Ablation, 2, 1);
    cfg.n = 30;
    cfg.adam = AdamConfig {
        iterations: 10,
        ..AdamConfig::default()
    };
    cfg.n_boot = 3;
    cfg.outer_boot = 5;
    cfg.omegas = vec![0.5, 2.0];
    cfg.oracle_mc = 2000;
    cfg.grid_size = 10;
    cfg.sampling_gp_samples = 10;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("runs");
    ok(&[
        "benchmark",
        "--experiment",
        "ablation",
        "--trials",
        "2",
        "--seed",
        "1",
        "--out",
        s(&out),
        "--config",
        s(&cfg_path),
    ]);
    let runs: Vec<PathBuf> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with(&cfg.hash()[..8]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash().as_str());
    let mut trials: Vec<usize> = read_rows_csv(&run.join("trial_rows.csv"))
        .unwrap()
        .iter()
        .map(|r| r.trial)
        .collect();
    trials.sort();
    trials.dedup();
    assert_eq!(trials, vec![0, 1]);
}

#[test]
fn exit_codes() {
    assert_eq!(impspec(&["frobnicate"]).status.code(), Some(2));
    let out = impspec(&[
        "fit",
        "--data",
        "/nonexistent/primary.csv",
        "--roles",
        "/nonexistent/roles.json",
        "--out",
        "/tmp/never.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = impspec(&["cbo", "--task", "ablation", "--method", "bo", "--seed", "0", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
}
