//! Acceptance suite: runs every acceptance criterion at its stated size and
//! tolerance and prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.
//! `ACCEPTANCE_STRICT=1` turns any FAIL into a non-zero exit status.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mkv_lan::inference::{
    estimate, fisher_quadrature, fisher_quadrature_oracle, rate_study, EstimateOptions, RateOptions,
};
use mkv_lan::lan::{
    clt_condition_sums, lan_harness, true_parameter_scores, ConditionalExpectation, LanOptions,
    LocalPerturbation, MomentSource,
};
use mkv_lan::model::{BuiltinModel, InitialLaw, Interval, MeasureSnapshot, ThetaPair};
use mkv_lan::oracle::{conditional_moments_mc, ou_transition, taylor_mean_identity_check, MeanFlow, TaylorContext};
use mkv_lan::rng::{derive_seed, seeded_rng};
use mkv_lan::simulate::{simulate_particles, simulate_with_tangents, SimConfig, SimMode};
use mkv_lan::stats::mean_var;
use rand::RngExt;

const SEED: u64 = 20_240_601;

struct Verdict {
    passed: bool,
    detail: String,
}

fn theta(t1: f64, t2: f64) -> ThetaPair {
    let b = Interval::new(0.1, 5.0).unwrap();
    ThetaPair::new(t1, t2, b, b).unwrap()
}

fn stationary_ou(t1: f64, t2: f64) -> BuiltinModel {
    BuiltinModel::mean_field_ou(0.0, InitialLaw::stationary_ou(1, t1, t2)).unwrap()
}

fn desk_config(n_particles: usize, seed: u64) -> SimConfig {
    SimConfig::new(n_particles, 50, 1.0, 8, seed, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle)
}

/// LAN limit of the exact log-likelihood ratio.
fn lan_limit() -> Verdict {
    let model = stationary_ou(1.0, 1.0);
    let (sb, sa) = (0.5, 2.0);
    let opts = LanOptions { sigma: Some((sb, sa)), ..LanOptions::default() };
    let r = lan_harness(&model, &desk_config(2000, 0), 1.0, 1.0, 500, SEED, &opts).unwrap();
    let target_mean = -0.5 * (sb + sa);
    let target_var = sb + sa;
    let mean_ok = (r.mean - target_mean).abs() <= 3.0 * r.mean_se;
    let var_ok = (r.var - target_var).abs() <= 0.15 * target_var;
    let ks_ok = r.ks_pvalue >= 0.01;
    Verdict {
        passed: mean_ok && var_ok && ks_ok,
        detail: format!(
            "mean {:.4} (target {target_mean}, 3 SE = {:.4}), var {:.4} (target {target_var} ±15%), KS p {:.3}",
            r.mean,
            3.0 * r.mean_se,
            r.var,
            r.ks_pvalue
        ),
    }
}

/// Median `|z − Σζ̂|` halves when N goes 500 → 2000.
fn expansion_fidelity() -> Verdict {
    let model = stationary_ou(1.0, 1.0);
    let opts = LanOptions { sigma: Some((0.5, 2.0)), expansion: true, ..LanOptions::default() };
    let run = |n: usize| {
        let r = lan_harness(&model, &desk_config(n, 0), 1.0, 1.0, 200, derive_seed(SEED, n as u64), &opts).unwrap();
        let e = r.expansion.unwrap();
        (e.median_gap, e.median_centered_gap)
    };
    let (g500, c500) = run(500);
    let (g2000, c2000) = run(2000);
    let ratio = g500 / g2000;
    Verdict {
        passed: (ratio - 2.0).abs() <= 0.3 * 2.0,
        detail: format!(
            "median gap {g500:.4} (N=500) / {g2000:.4} (N=2000) = {ratio:.3} (target 2 ±30%); \
             centred-score gaps {c500:.4} / {c2000:.4} = {:.3}",
            c500 / c2000
        ),
    }
}

/// Conditional means of the true-parameter score cells vanish.
fn centering() -> Verdict {
    let model = stationary_ou(1.0, 1.0);
    let m = 10_000;
    let cfg = desk_config(m, derive_seed(SEED, 3));
    let grid = simulate_particles(&model, &cfg).unwrap();
    let pert = LocalPerturbation::new(cfg.theta, 1.0, 1.0, 1, cfg.delta()).unwrap();
    let src = MomentSource::for_model(&model);
    let (drift, diff) = true_parameter_scores(&grid, None, &pert, &model, &src, 5).unwrap();
    let mut worst = 0.0f64;
    for k in 0..grid.n_steps() {
        for cells in [&drift, &diff] {
            let (mean, var) = mean_var(&cells[k * m..(k + 1) * m]);
            worst = worst.max(mean.abs() / (var / m as f64).sqrt());
        }
    }
    Verdict {
        passed: worst <= 4.0,
        detail: format!("worst |mean|/SE over {} steps and both families: {worst:.3} (limit 4)", grid.n_steps()),
    }
}

/// Fisher quadrature: exact diffusion block and the stationary drift block.
fn fisher() -> Verdict {
    let m = stationary_ou(1.0, 0.5);
    let cfg = SimConfig::new(200, 50, 1.0, 8, derive_seed(SEED, 4), theta(1.0, 0.5));
    let (grid, tangents) = simulate_with_tangents(&m, &cfg).unwrap();
    let fa = fisher_quadrature(&grid, &tangents, &m, &cfg.theta).unwrap();
    let exact_a = (fa.sigma_a - 8.0).abs() < 1e-12;

    let m = stationary_ou(1.0, 1.0);
    let cfg = SimConfig::new(2000, 50, 1.0, 8, derive_seed(SEED, 41), theta(1.0, 1.0));
    let (grid, tangents) = simulate_with_tangents(&m, &cfg).unwrap();
    let fb = fisher_quadrature(&grid, &tangents, &m, &cfg.theta).unwrap();
    let b_ok = (fb.sigma_b - 0.5).abs() <= 3.0 * fb.se_b;
    let fo = fisher_quadrature_oracle(&grid, &m, &cfg.theta, 0.0, &[0.0]).unwrap();
    Verdict {
        passed: exact_a && b_ok,
        detail: format!(
            "Σ̂_a = {:.12} (target 8), Σ̂_b = {:.4} ± {:.4} (target 0.5, 3 SE); closed-form z gives {:.4}",
            fa.sigma_a, fb.sigma_b, fb.se_b, fo.sigma_b
        ),
    }
}

fn rate_n_steps(n: usize) -> usize {
    match n {
        250 => 25,
        1000 => 50,
        _ => 100,
    }
}

/// √N and √(N/Δ) rates of the contrast estimator.
fn rates() -> Verdict {
    let t0 = {
        let b = Interval::new(0.1, 3.0).unwrap();
        ThetaPair::new(1.0, 0.5, b, b).unwrap()
    };
    let model = stationary_ou(1.0, 0.5);
    let r = rate_study(&model, &t0, &[250, 1000, 4000], rate_n_steps, 200, derive_seed(SEED, 5), &RateOptions::default())
        .unwrap();
    let ok1 = (r.slope_theta1 + 0.5).abs() <= 0.1;
    let ok2 = (r.slope_theta2 + 0.5).abs() <= 0.1;
    let failures: usize = r.rows.iter().map(|row| row.not_converged).sum();
    Verdict {
        passed: ok1 && ok2,
        detail: format!(
            "slope θ̂1 vs log N {:.3} ± {:.3}, slope θ̂2 vs log(N/Δ) {:.3} ± {:.3} (targets −0.5 ± 0.1); \
             RMSE θ1 {:?}, θ2 {:?}; non-converged runs {failures}",
            r.slope_theta1,
            r.slope_theta1_se,
            r.slope_theta2,
            r.slope_theta2_se,
            r.rows.iter().map(|row| format!("{:.4}", row.rmse_theta1)).collect::<Vec<_>>(),
            r.rows.iter().map(|row| format!("{:.5}", row.rmse_theta2)).collect::<Vec<_>>(),
        ),
    }
}

/// Sample variance of `√N(θ̂1 − θ1⁰)` against `1/Σ_b`.
fn efficiency() -> Verdict {
    let model = stationary_ou(1.0, 1.0);
    let reps = 400;
    let n = 2000;
    let init = theta(1.0, 1.0).midpoint();
    let scaled: Vec<f64> = (0..reps)
        .map(|r| {
            let cfg = desk_config(n, derive_seed(derive_seed(SEED, 6), r as u64));
            let grid = simulate_particles(&model, &cfg).unwrap();
            let e = estimate(&grid, &model, &init, &EstimateOptions::default()).unwrap();
            (n as f64).sqrt() * (e.theta_hat.theta1 - 1.0)
        })
        .collect();
    let (mean, var) = mean_var(&scaled);
    let bound = 1.0 / 0.5;
    Verdict {
        passed: (var - bound).abs() <= 0.2 * bound,
        detail: format!("var √N(θ̂1 − 1) = {var:.4} over {reps} reps (target 1/Σ_b = {bound} ±20%), mean {mean:.4}"),
    }
}

/// Oracle cross-checks: MC moments, tangents vs finite differences, Taylor
/// identity order.
fn oracle_cross_checks() -> Verdict {
    let mut notes = Vec::new();

    // MC conditional moments
    let kappa = 0.5;
    let m0 = 1.0;
    let model = BuiltinModel::mean_field_ou(kappa, InitialLaw::Point { x: vec![m0] }).unwrap();
    let th = theta(1.2, 0.8);
    let mut rng = seeded_rng(derive_seed(SEED, 7));
    let mut worst_mc = 0.0f64;
    for p in 0..20 {
        let x: f64 = rng.random_range(-2.0..2.0);
        let t: f64 = rng.random_range(0.0..2.0);
        let dt: f64 = rng.random_range(0.01..0.2);
        let fine = 200;
        let flow = MeanFlow { m0, kappa, theta1: th.theta1 };
        let mu_path: Vec<MeasureSnapshot> =
            (0..fine).map(|j| MeasureSnapshot::dirac(&[flow.value(t + j as f64 * dt / fine as f64)])).collect();
        let est = conditional_moments_mc(&model, &th, &[x], dt, &mu_path, 20_000, derive_seed(SEED, 70 + p)).unwrap();
        let exact = ou_transition(&th, kappa, m0, t, x, dt).unwrap();
        worst_mc = worst_mc.max((est.mean[0] - exact.mean[0]).abs() / est.mean_se[0]);
        worst_mc = worst_mc.max((est.cov[(0, 0)] - exact.cov[(0, 0)]).abs() / est.cov_se[(0, 0)]);
    }
    let mc_ok = worst_mc <= 4.0;
    notes.push(format!("MC moments worst deviation {worst_mc:.2} SE (limit 4)"));

    // tangents against central finite differences with common noise
    let tanh = BuiltinModel::tanh_interaction(0.8, 0.3, InitialLaw::Gaussian { mean: vec![0.2], std: vec![0.7] })
        .unwrap();
    let cfg = SimConfig::new(64, 10, 1.0, 4, derive_seed(SEED, 71), theta(1.0, 0.7));
    let (grid, cloud) = simulate_with_tangents(&tanh, &cfg).unwrap();
    let mut worst_fd = 0.0f64;
    for which in 0..2 {
        let base = if which == 0 { cfg.theta.theta1 } else { cfg.theta.theta2 };
        let eps = 1e-5 * base;
        let shifted = |s: f64| {
            let mut c = cfg.clone();
            c.theta = if which == 0 {
                cfg.theta.with_values(base + s, cfg.theta.theta2).unwrap()
            } else {
                cfg.theta.with_values(cfg.theta.theta1, base + s).unwrap()
            };
            simulate_particles(&tanh, &c).unwrap()
        };
        let (up, down) = (shifted(eps), shifted(-eps));
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..grid.n_particles() {
            for k in 0..=grid.n_steps() {
                let fd = (up.state(i, k)[0] - down.state(i, k)[0]) / (2.0 * eps);
                let tg = if which == 0 { cloud.d_theta1(i, k)[0] } else { cloud.d_theta2(i, k)[0] };
                num += (fd - tg).powi(2);
                den += fd * fd;
            }
        }
        worst_fd = worst_fd.max((num / den).sqrt());
    }
    let fd_ok = worst_fd < 1e-2;
    notes.push(format!("tangent relative error {worst_fd:.2e} (limit 1e-2)"));

    // Taylor identity residual ratio as Δ halves at fixed t
    let ctx = |delta: f64| TaylorContext { kappa, m0, n_particles: 2000, delta };
    let mut worst_ratio = f64::INFINITY;
    for (x, t) in [(0.3, 0.5), (-1.0, 0.2), (1.5, 0.8)] {
        let coarse = taylor_mean_identity_check(&th, 1.0, 1.0, (t / 0.02f64).round() as usize, x, &ctx(0.02));
        let fine = taylor_mean_identity_check(&th, 1.0, 1.0, (t / 0.01f64).round() as usize, x, &ctx(0.01));
        worst_ratio = worst_ratio.min(coarse / fine);
    }
    let taylor_ok = worst_ratio >= 1.9;
    notes.push(format!("Taylor residual ratio {worst_ratio:.3} (limit 1.9)"));

    Verdict { passed: mc_ok && fd_ok && taylor_ok, detail: notes.join("; ") }
}

const CONFIG: &str = r#"
[model]
id = "mean_field_ou"

[theta]
theta1 = 1.0
theta2 = 0.8
box1 = [0.2, 3.0]
box2 = [0.2, 3.0]

[simulate]
n_particles = 60
n_steps = 10
substeps = 4

[lan]
u = 1.0
v = 1.0
replications = 12
expansion = true
clt = { kind = "closed_form" }

[estimate]
max_iter = 300

[rates]
ns = [40, 160, 640]
n_steps = [5, 10, 20]
reps = 4

[validate]
probes = 5
"#;

fn csv_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Same seed, different thread counts, byte-identical CSV outputs.
fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for cmd in ["simulate", "lan-check", "fisher", "estimate", "rates", "validate-model"] {
        let run = |threads: &str| {
            let out = tmp.path().join(format!("{cmd}-{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_mkv-lan"))
                .args([cmd, "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .args(["--seed", "11", "--threads", threads, "--format", "both"])
                .status()
                .unwrap();
            (status.code(), csv_outputs(&out))
        };
        let (c1, a) = run("1");
        let (c2, b) = run("3");
        let same = c1 == Some(0) && c2 == Some(0) && !a.is_empty() && a == b;
        ok &= same;
        notes.push(format!("{cmd}: {} csv {}", a.len(), if same { "identical" } else { "DIFFER" }));
    }
    Verdict { passed: ok, detail: notes.join(", ") }
}

const CLT_NAMES: [&str; 7] = ["E S_b", "Var S_b", "E S_b⁴", "E S_a", "Var S_a", "E S_a⁴", "Cov"];

/// The seven CLT condition sums on the desk-scale oracle configuration.
fn clt_sums() -> Verdict {
    let model = stationary_ou(1.0, 1.0);
    let (sb, sa) = (0.5, 2.0);
    let opts = LanOptions {
        sigma: Some((sb, sa)),
        clt: Some(ConditionalExpectation::ClosedForm),
        ..LanOptions::default()
    };
    let r = lan_harness(&model, &desk_config(2000, 0), 1.0, 1.0, 200, derive_seed(SEED, 9), &opts).unwrap();
    let (sums, se) = (r.clt_sums.unwrap(), r.clt_se.unwrap());
    let mut ok = true;
    let mut parts = Vec::new();
    for j in 0..7 {
        let within = (sums[j] - r.clt_targets[j]).abs() <= 4.0 * se[j];
        ok &= within;
        parts.push(format!(
            "{} {:.4}±{:.4} vs {} {}",
            CLT_NAMES[j],
            sums[j],
            se[j],
            r.clt_targets[j],
            if within { "ok" } else { "off" }
        ));
    }
    // the inner Monte Carlo agrees with the closed forms on one data set
    let grid = simulate_particles(&model, &desk_config(2000, derive_seed(SEED, 90))).unwrap();
    let pert = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 1.0, 2000, 0.02).unwrap();
    let src = MomentSource::for_model(&model);
    let closed = clt_condition_sums(&grid, None, &pert, &model, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
    parts.push(format!("closed-form sums on one data set {:?}", closed.map(|v| (v * 1e4).round() / 1e4)));
    Verdict { passed: ok, detail: parts.join("; ") }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; ignore them
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, fn() -> Verdict); 9] = [
        (1, "LAN limit", lan_limit),
        (2, "expansion fidelity", expansion_fidelity),
        (3, "centering", centering),
        (4, "Fisher quadrature", fisher),
        (5, "rates", rates),
        (6, "efficiency", efficiency),
        (7, "oracle cross-checks", oracle_cross_checks),
        (8, "deterministic reproducibility", reproducibility),
        (9, "CLT condition sums", clt_sums),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {status} [{:.1}s] {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}
