//! Experiment runner for the mkv-lan laboratory.
//!
//! `mkv-lan <command> --config FILE [--out DIR] [--seed S] [--threads K]
//! [--format csv|json|both]` reads the configuration, runs the command in a
//! thread pool of the requested size and writes its reports together with
//! `provenance.json` into the output directory.

pub mod config;
pub mod output;
pub mod plot;

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Parser;
use mkv_lan::inference::{
    estimate, fisher_for, rate_study, EstimateOptions, RateOptions,
};
use mkv_lan::lan::{lan_harness, LanOptions, LanReport};
use mkv_lan::model::validate_model;
use mkv_lan::simulate::{simulate_particles, simulate_with_tangents};
use mkv_lan::{ModelSpec, SimMode, TrajectoryGrid};
use serde::Serialize;

pub use config::{Command, ExperimentConfig};
pub use output::{Format, OutputDir, ProvenanceRecord};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "MKV_LAN_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] mkv_lan::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    /// The run completed but its verdict is negative (failed model checks).
    #[error("validation failed: {0}")]
    Failed(String),
}

impl CliError {
    /// 2 for numerical propagation failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mkv-lan", version, about = "Simulation and inference for discretely observed McKean–Vlasov SDEs")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed` in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub format: Format,
}

/// Resolve flags and config, run the command, write outputs. Partial
/// outputs are removed when the command fails.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(c) = cfg.command {
        if c != cli.command {
            return Err(CliError::Config(format!(
                "at key `command`: config is for `{}` but `{}` was requested",
                c.name(),
                cli.command.name()
            )));
        }
    }
    cfg.command = Some(cli.command);
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let seed = cfg.seed.ok_or_else(|| CliError::Config("at key `seed`: a seed is required".into()))?;
    let out_dir = match (&cli.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => relative_to_config(&cli.config, o),
        (None, None) => return Err(CliError::Config("at key `out`: no output directory given".into())),
    };
    cfg.out = Some(out_dir.clone());
    let model = cfg.model()?;
    cfg.theta()?;

    let threads = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(k) => k,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;

    let mut out = OutputDir::prepare(&out_dir)?;
    let result = pool.install(|| dispatch(cli, &cfg, &model, seed, &mut out));
    let verdict = match result {
        Ok(v) => v,
        Err(e) => {
            out.discard();
            return Err(e);
        }
    };
    let record = ProvenanceRecord {
        artifact: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        config_sha256: output::sha256_hex(&serde_json::to_vec(&cfg).map_err(|e| CliError::Config(e.to_string()))?),
        seed,
        threads,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        outputs: out.outputs().to_vec(),
    };
    if let Err(e) = out.write_json("provenance.json", &record) {
        out.discard();
        return Err(e);
    }
    match verdict {
        Some(msg) => Err(CliError::Failed(msg)),
        None => Ok(out_dir),
    }
}

fn relative_to_config(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
    }
}

/// `Ok(Some(msg))` when the run completed with a failing verdict.
fn dispatch(
    cli: &Cli,
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    out: &mut OutputDir,
) -> Result<Option<String>, CliError> {
    match cli.command {
        Command::Simulate => simulate_cmd(cfg, model, seed, cli.format, out).map(|_| None),
        Command::LanCheck => lan_cmd(cfg, model, seed, cli.format, out).map(|_| None),
        Command::Fisher => fisher_cmd(cfg, model, seed, cli.format, out).map(|_| None),
        Command::Estimate => estimate_cmd(cli, cfg, model, seed, out).map(|_| None),
        Command::Rates => rates_cmd(cfg, model, seed, cli.format, out).map(|_| None),
        Command::ValidateModel => validate_cmd(cfg, model, seed, cli.format, out),
    }
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    report: &'a T,
}

fn simulate_cmd(
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    format: Format,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let sim = cfg.sim_config(seed)?;
    let grid = simulate_particles(model, &sim)?;
    let moments = grid_moments(&grid);
    if format.csv() {
        let mut buf = Vec::new();
        grid.write_csv(&mut buf)?;
        out.write("trajectories.csv", &buf)?;
        let mut s = String::from("t,coordinate,mean,var\n");
        for m in &moments {
            let _ = writeln!(s, "{:?},{},{:?},{:?}", m.t, m.coordinate, m.mean, m.var);
        }
        out.write("moments.csv", s.as_bytes())?;
    }
    if format.json() {
        #[derive(Serialize)]
        struct Report<'a> {
            n_particles: usize,
            n_steps: usize,
            dim: usize,
            moments: &'a [TimeMoment],
        }
        let r = Report { n_particles: grid.n_particles(), n_steps: grid.n_steps(), dim: grid.dim(), moments: &moments };
        out.write_json("simulate_report.json", &WithConfig { config: cfg, report: &r })?;
        let mut bin = Vec::new();
        grid.write_binary(&mut bin)?;
        out.write("trajectories.bin", &bin)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TimeMoment {
    t: f64,
    coordinate: usize,
    mean: f64,
    var: f64,
}

fn grid_moments(grid: &TrajectoryGrid) -> Vec<TimeMoment> {
    let mut rows = Vec::new();
    for k in 0..=grid.n_steps() {
        for c in 0..grid.dim() {
            let v: Vec<f64> = (0..grid.n_particles()).map(|i| grid.state(i, k)[c]).collect();
            let (mean, var) = mkv_lan::stats::mean_var(&v);
            rows.push(TimeMoment { t: grid.times()[k], coordinate: c, mean, var });
        }
    }
    rows
}

const CLT_LABELS: [&str; 7] =
    ["mean_drift", "var_drift", "fourth_drift", "mean_diffusion", "var_diffusion", "fourth_diffusion", "cov"];

fn lan_cmd(
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    format: Format,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let sim = cfg.sim_config(seed)?;
    let l = &cfg.lan;
    let opts = LanOptions {
        quadrature_order: l.quadrature_order,
        expansion: l.expansion,
        clt: l.clt,
        sigma: l.sigma.map(|s| (s[0], s[1])),
        pilot_particles: l.pilot_particles,
        ks_alpha: l.ks_alpha,
    };
    let report = lan_harness(model, &sim, l.u, l.v, l.replications, seed, &opts)?;
    if format.json() {
        out.write_json("lan_report.json", &WithConfig { config: cfg, report: &report })?;
    }
    if format.csv() {
        write_lan_tables(&report, l.bins, out)?;
    }
    Ok(())
}

fn write_lan_tables(report: &LanReport, bins: usize, out: &mut OutputDir) -> Result<(), CliError> {
    let mut z = String::from("replication,z\n");
    for (r, v) in report.z_values.iter().enumerate() {
        let _ = writeln!(z, "{r},{v:?}");
    }
    out.write("z_values.csv", z.as_bytes())?;
    let (hist, qq) = plot::emit_plot_data(&report.z_values, report.mean_target, report.sigma2_target, bins);
    out.write("histogram.csv", hist.as_bytes())?;
    out.write("qq.csv", qq.as_bytes())?;
    if let (Some(sums), Some(se)) = (report.clt_sums, report.clt_se) {
        let mut s = String::from("condition,estimate,se,target\n");
        for j in 0..7 {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", CLT_LABELS[j], sums[j], se[j], report.clt_targets[j]);
        }
        out.write("clt_sums.csv", s.as_bytes())?;
    }
    if let Some(e) = &report.expansion {
        let mut s = String::from("replication,z,zeta_sum,gap,centered_gap\n");
        for r in 0..report.z_values.len() {
            let get = |v: &Vec<f64>| v.get(r).copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "{r},{:?},{:?},{:?},{:?}",
                report.z_values[r],
                get(&e.zeta_sums),
                get(&e.gaps),
                get(&e.centered_gaps)
            );
        }
        out.write("expansion.csv", s.as_bytes())?;
    }
    Ok(())
}

fn fisher_cmd(
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    format: Format,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let sim = cfg.sim_config(seed)?;
    let theta = cfg.theta()?;
    let info = if sim.mode == SimMode::ExactOracle {
        let grid = simulate_particles(model, &sim)?;
        fisher_for(&grid, None, model, &theta)?
    } else {
        let (grid, tangents) = simulate_with_tangents(model, &sim)?;
        fisher_for(&grid, Some(&tangents), model, &theta)?
    };
    if format.json() {
        out.write_json("fisher.json", &WithConfig { config: cfg, report: &info })?;
    }
    if format.csv() {
        let s = format!(
            "block,estimate,se\nsigma_b,{:?},{:?}\nsigma_a,{:?},{:?}\n",
            info.sigma_b, info.se_b, info.sigma_a, info.se_a
        );
        out.write("fisher.csv", s.as_bytes())?;
    }
    Ok(())
}

fn load_grid(path: &Path) -> Result<TrajectoryGrid, CliError> {
    let f = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("at key `estimate.data`: cannot open {}: {e}", path.display())))?;
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let grid = if csv { TrajectoryGrid::read_csv(BufReader::new(f))? } else { TrajectoryGrid::read_binary(BufReader::new(f))? };
    Ok(grid)
}

fn estimate_cmd(
    cli: &Cli,
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let e = &cfg.estimate;
    let theta = cfg.theta()?;
    let grid = match &e.data {
        Some(p) => load_grid(&relative_to_config(&cli.config, p))?,
        None => simulate_particles(model, &cfg.sim_config(seed)?)?,
    };
    if grid.dim() != model.dim() {
        return Err(CliError::Config("at key `estimate.data`: grid dimension differs from the model".into()));
    }
    let init = match e.init {
        Some([a, b]) => theta.with_values(a, b).map_err(|err| CliError::Config(format!("at key `estimate.init`: {err}")))?,
        None => theta.midpoint(),
    };
    let opts = EstimateOptions {
        contrast: e.contrast,
        tol: e.tol,
        max_iter: e.max_iter,
        profile_theta1: e.profile_theta1,
        fisher: None,
    };
    let result = estimate(&grid, model, &init, &opts)?;
    if cli.format.json() {
        out.write_json("estimate.json", &WithConfig { config: cfg, report: &result })?;
    }
    if cli.format.csv() {
        let s = format!(
            "theta1_hat,theta2_hat,contrast,iterations,converged\n{:?},{:?},{:?},{},{}\n",
            result.theta_hat.theta1, result.theta_hat.theta2, result.contrast, result.iterations, result.converged
        );
        out.write("estimate.csv", s.as_bytes())?;
    }
    Ok(())
}

fn rates_cmd(
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    format: Format,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let r = &cfg.rates;
    if r.ns.len() != r.n_steps.len() {
        return Err(CliError::Config("at key `rates.n_steps`: needs one entry per value of `rates.ns`".into()));
    }
    let theta = cfg.theta()?;
    let opts = RateOptions {
        horizon: cfg.simulate.horizon,
        substeps: cfg.simulate.substeps,
        mode: cfg.simulate.mode,
        estimate: EstimateOptions {
            contrast: cfg.estimate.contrast,
            tol: cfg.estimate.tol,
            max_iter: cfg.estimate.max_iter,
            profile_theta1: cfg.estimate.profile_theta1,
            fisher: None,
        },
    };
    let mapping = |n: usize| r.ns.iter().position(|&m| m == n).map(|j| r.n_steps[j]).unwrap_or(r.n_steps[0]);
    let report = rate_study(model, &theta, &r.ns, mapping, r.reps, seed, &opts)?;
    if format.json() {
        out.write_json("rates.json", &WithConfig { config: cfg, report: &report })?;
    }
    if format.csv() {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        out.write("rates.csv", &buf)?;
    }
    Ok(())
}

fn validate_cmd(
    cfg: &ExperimentConfig,
    model: &mkv_lan::BuiltinModel,
    seed: u64,
    format: Format,
    out: &mut OutputDir,
) -> Result<Option<String>, CliError> {
    let report = validate_model(model, cfg.validate.probes, seed)?;
    if format.json() {
        out.write_json("validation.json", &WithConfig { config: cfg, report: &report })?;
    }
    if format.csv() {
        let mut s = String::from("check,passed,worst,threshold,note\n");
        for c in &report.checks {
            let threshold = c.threshold.map(|t| format!("{t:?}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:?},{},\"{}\"", c.name, c.passed, c.worst, threshold, c.note.replace('"', "'"));
        }
        out.write("validation.csv", s.as_bytes())?;
    }
    if report.passed() {
        Ok(None)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Ok(Some(format!("model `{}` failed checks: {}", model.name(), failed.join(", "))))
    }
}
