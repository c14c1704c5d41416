//! `impspec` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use impspec::calibration::{
    default_alphas, optimize_spectral_measure, CalibrationGrid, ImpSpecModel, DEFAULT_OMEGAS,
};
use impspec::cbo::{BoTrace, PriorKind};
use impspec::data::{Dataset, Roles, Table};
use impspec::experiments::{
    benchmark_oracle, emit_outputs, run_benchmark, run_cbo_trial, BenchmarkConfig, EmitStatus,
    ExperimentName,
};
use impspec::gp::{fit, AdamConfig, FittedModel, ModelParams};
use impspec::kernels::{BaseScale, SpectralMeasure};
use impspec::posterior::{CausalQuery, EvalPoint, Posterior};
use impspec::simulators::{simulate, DgpName, DgpSpec, PropensityMode};
use impspec::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_BUDGET: u8 = 4;

#[derive(Parser)]
#[command(name = "impspec", version, about = "Spectral GP posteriors for causal effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a built-in simulator.
    Simulate {
        #[arg(long)]
        dgp: DgpName,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_propensity, default_value = "bernoulli")]
        propensity: PropensityMode,
    },
    /// Fit model hyperparameters by marginal-likelihood ADAM.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        roles: PathBuf,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Posterior mean and variance of the effect at each point.
    Effect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        measure_omega: f64,
    },
    /// Choose the spectral-measure scale by bootstrap calibration.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        roles: PathBuf,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 20)]
        boot: usize,
        #[arg(long)]
        candidates: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run a multi-trial benchmark and write a run directory.
    Benchmark {
        #[arg(long)]
        experiment: ExperimentName,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON config; `--trials` and `--seed` override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "IMPSPEC_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Causal Bayesian optimisation with one surrogate prior.
    Cbo {
        #[arg(long)]
        task: ExperimentName,
        #[arg(long)]
        method: PriorKind,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        refit_every: usize,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue a trace written by an earlier run (single trial only).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, env = "IMPSPEC_JOBS", default_value_t = 1)]
        jobs: usize,
    },
}

/// Fitted model with the data it was trained on.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    roles: Roles,
    params: ModelParams,
    primary: Table,
    fusion: Option<Table>,
}

impl ModelFile {
    fn dataset(&self) -> impspec::Result<Dataset> {
        Dataset::new(self.primary.clone(), self.fusion.clone(), self.roles.clone())
    }
}

/// Evaluation points of a calibration run; α defaults to the 99-point grid.
#[derive(Deserialize)]
struct GridFile {
    alphas: Option<Vec<f64>>,
    eval_points: Vec<EvalPoint>,
}

fn parse_propensity(s: &str) -> Result<PropensityMode, String> {
    match s {
        "continuous" => Ok(PropensityMode::Continuous),
        "bernoulli" => Ok(PropensityMode::Bernoulli),
        other => Err(format!("unknown propensity mode `{other}`")),
    }
}

/// Accepts decimals and powers written `b^e`, e.g. `2^-4`.
fn parse_candidates(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            match t.split_once('^') {
                Some((b, e)) => Ok(b.trim().parse::<f64>()?.powf(e.trim().parse::<f64>()?)),
                None => Ok(t.parse::<f64>()?),
            }
        })
        .collect::<Result<Vec<_>, std::num::ParseFloatError>>()
        .with_context(|| format!("bad candidate list `{s}`"))
}

fn load_dataset(data: &Path, roles: &Path, fusion: Option<&Path>) -> anyhow::Result<Dataset> {
    let primary = Table::load(data).with_context(|| format!("reading {}", data.display()))?;
    let fusion = fusion
        .map(|p| Table::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let roles = Roles::load(roles).with_context(|| format!("reading {}", roles.display()))?;
    Ok(Dataset::new(primary, fusion, roles)?)
}

fn adam(iters: Option<usize>) -> AdamConfig {
    let mut cfg = AdamConfig::default();
    if let Some(i) = iters {
        cfg.iterations = i;
    }
    cfg
}

fn cmd_simulate(
    dgp: DgpName,
    n: usize,
    seed: u64,
    out: &Path,
    propensity: PropensityMode,
) -> anyhow::Result<()> {
    let spec = DgpSpec {
        name: dgp,
        n,
        seed,
        propensity,
    };
    let ds = simulate(&spec)?;
    std::fs::create_dir_all(out)?;
    ds.primary.save(&out.join("primary.csv"))?;
    if let Some(f) = &ds.fusion {
        f.save(&out.join("fusion.csv"))?;
    }
    ds.roles.save(&out.join("roles.json"))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_fit(
    data: &Path,
    roles: &Path,
    fusion: Option<&Path>,
    out: &Path,
    iters: Option<usize>,
) -> anyhow::Result<()> {
    let ds = load_dataset(data, roles, fusion)?;
    let problem = ds.problem()?;
    let params = fit(&problem, &ModelParams::initial(&problem), &adam(iters))?;
    let file = ModelFile {
        roles: ds.roles,
        params,
        primary: ds.primary,
        fusion: ds.fusion,
    };
    std::fs::write(out, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

fn cmd_effect(model: &Path, query: &Path, points: &Path, omega: f64) -> anyhow::Result<()> {
    let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(model)?)
        .with_context(|| format!("reading {}", model.display()))?;
    let query: CausalQuery = serde_json::from_str(&std::fs::read_to_string(query)?)
        .with_context(|| format!("reading {}", query.display()))?;
    let problem = file.dataset()?.problem()?;
    let fitted = FittedModel::new(problem, file.params)?;
    query.check(&fitted)?;
    let measure = SpectralMeasure::from_points(&fitted.problem.v1, omega, BaseScale::Variance)?;
    let post = Posterior::new(&fitted, &measure)?;
    let table = Table::load(points)?;
    let w: Vec<&[f64]> = query
        .roles
        .w
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<_, _>>()?;
    let z: Vec<&[f64]> = query
        .roles
        .z
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<_, _>>()?;
    let mut out = std::io::stdout().lock();
    let header: Vec<&str> = query
        .roles
        .w
        .iter()
        .chain(&query.roles.z)
        .map(String::as_str)
        .chain(["mean", "variance", "s1", "s2", "s3"])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..table.nrows() {
        let pt = EvalPoint::new(w.iter().map(|c| c[i]).collect(), z.iter().map(|c| c[i]).collect());
        let m = post.moments(&pt)?;
        let fields: Vec<String> = pt
            .w
            .iter()
            .chain(&pt.z)
            .chain([&m.mean, &m.variance, &m.s1, &m.s2, &m.s3])
            .map(f64::to_string)
            .collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    data: &Path,
    roles: &Path,
    fusion: Option<&Path>,
    grid: &Path,
    boot: usize,
    candidates: Option<&str>,
    seed: u64,
    iters: Option<usize>,
) -> anyhow::Result<()> {
    let ds = load_dataset(data, roles, fusion)?;
    let problem = ds.problem()?;
    let g: GridFile = serde_json::from_str(&std::fs::read_to_string(grid)?)
        .with_context(|| format!("reading {}", grid.display()))?;
    let omegas = match candidates {
        Some(s) => parse_candidates(s).map_err(|e| Error::Config(e.to_string()))?,
        None => DEFAULT_OMEGAS.to_vec(),
    };
    let grid = CalibrationGrid::new(
        g.alphas.unwrap_or_else(default_alphas),
        g.eval_points,
        omegas,
    )?;
    let params = fit(&problem, &ModelParams::initial(&problem), &adam(iters))?;
    let model = ImpSpecModel::frozen(params);
    let choice = optimize_spectral_measure(&model, &problem, &grid, BaseScale::Variance, boot, seed)?;
    println!("{}", serde_json::to_string_pretty(&choice)?);
    Ok(())
}

fn run_dir(out: &Path, cfg: &BenchmarkConfig) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    out.join(format!("{stamp}-{}", &cfg.hash()[..8]))
}

fn cmd_benchmark(
    experiment: ExperimentName,
    trials: Option<usize>,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
    jobs: usize,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => BenchmarkConfig::load(p)?,
        None => BenchmarkConfig::new(experiment, trials.unwrap_or(20), seed),
    };
    if cfg.experiment != experiment {
        return Err(Error::Config(format!(
            "config is for {}, not {experiment}",
            cfg.experiment
        ))
        .into());
    }
    cfg.seed = seed;
    if let Some(t) = trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    let bundle = run_benchmark(&cfg, jobs)?;
    let dir = run_dir(out, &cfg);
    let status = emit_outputs(&bundle, &dir)?;
    for a in &bundle.aggregates {
        println!("{}\t{}\t{}\t{}\t{}", a.method, a.metric, a.mean, a.std, a.n);
    }
    for f in &bundle.failures {
        log::warn!("trial {} failed: {}", f.trial, f.error);
    }
    println!("{}", dir.display());
    if status == EmitStatus::ManifestOnly {
        return Err(Error::FailureBudget {
            failed: bundle.failures.len(),
            total: cfg.trials,
        }
        .into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cbo(
    task: ExperimentName,
    method: PriorKind,
    iters: usize,
    refit_every: usize,
    trials: usize,
    seed: u64,
    out: &Path,
    resume: Option<&Path>,
    jobs: usize,
) -> anyhow::Result<()> {
    if !task.is_cbo() {
        bail!(Error::Config(format!("{task} is not a BO task")));
    }
    let resume: Option<BoTrace> = resume
        .map(|p| -> anyhow::Result<BoTrace> {
            Ok(serde_json::from_str(&std::fs::read_to_string(p)?)
                .with_context(|| format!("reading {}", p.display()))?)
        })
        .transpose()?;
    if resume.is_some() && trials != 1 {
        bail!(Error::Config("--resume continues a single trial".into()));
    }
    let mut cfg = BenchmarkConfig::new(task, trials, seed);
    cfg.bo_iters = iters;
    cfg.refit_every = refit_every;
    cfg.validate()?;
    let oracle = benchmark_oracle(&cfg)?;
    let pool = rayon_pool(jobs)?;
    let results: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        (0..trials)
            .into_par_iter()
            .map(|t| run_cbo_trial(&cfg, &oracle, method, t, resume.as_ref()))
            .collect()
    });
    std::fs::create_dir_all(out)?;
    let mut first_err = None;
    for (t, r) in results.into_iter().enumerate() {
        let trace = match r {
            Ok(trace) => trace,
            Err(abort) => {
                log::error!("trial {t} aborted: {}", abort.source);
                first_err.get_or_insert(abort.source);
                abort.partial
            }
        };
        let stem = format!("{method}_trial{t}");
        std::fs::write(
            out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&trace)?,
        )?;
        trace.write_csv(std::fs::File::create(out.join(format!("{stem}.csv")))?)?;
        println!("{t}\t{}\t{}", trace.cumulative_regret(), trace.regret.last().copied().unwrap_or(f64::NAN));
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn rayon_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::FailureBudget { .. }) => EXIT_BUDGET,
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate {
            dgp,
            n,
            seed,
            out,
            propensity,
        } => cmd_simulate(dgp, n, seed, &out, propensity),
        Command::Fit {
            data,
            roles,
            fusion,
            out,
            iters,
        } => cmd_fit(&data, &roles, fusion.as_deref(), &out, iters),
        Command::Effect {
            model,
            query,
            points,
            measure_omega,
        } => cmd_effect(&model, &query, &points, measure_omega),
        Command::Calibrate {
            data,
            roles,
            fusion,
            grid,
            boot,
            candidates,
            seed,
            iters,
        } => cmd_calibrate(
            &data,
            &roles,
            fusion.as_deref(),
            &grid,
            boot,
            candidates.as_deref(),
            seed,
            iters,
        ),
        Command::Benchmark {
            experiment,
            trials,
            seed,
            out,
            config,
            jobs,
        } => cmd_benchmark(experiment, trials, seed, &out, config.as_deref(), jobs),
        Command::Cbo {
            task,
            method,
            iters,
            refit_every,
            trials,
            seed,
            out,
            resume,
            jobs,
        } => cmd_cbo(
            task,
            method,
            iters,
            refit_every,
            trials,
            seed,
            &out,
            resume.as_deref(),
            jobs,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
