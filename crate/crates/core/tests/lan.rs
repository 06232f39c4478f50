mod common;

use common::{ou, stationary_ou, theta};
use mkv_lan::lan::{
    clt_condition_sums, lan_harness, score_breakdown, z_field, zeta_hat_diff, zeta_hat_drift, ConditionalExpectation,
    LanOptions, LocalPerturbation, MomentSource,
};
use mkv_lan::measure::TangentMeasure;
use mkv_lan::model::ModelSpec;
use mkv_lan::oracle::{ou_log_density, ou_transition};
use mkv_lan::simulate::{simulate_particles, simulate_with_tangents};
use mkv_lan::stats::mean_var;
use mkv_lan::{InitialLaw, SimConfig, SimMode};

#[test]
fn z_field_is_minus_x_without_interaction() {
    let m = stationary_ou();
    let cfg = SimConfig::new(20, 4, 1.0, 2, 3, theta(1.0, 1.0));
    let (grid, cloud) = simulate_with_tangents(&m, &cfg).unwrap();
    let mu = grid.snapshot(4);
    let v = cloud.velocities_theta1(4);
    let tm = TangentMeasure::new(&mu, &v).unwrap();
    for x in [-1.3, 0.0, 2.2] {
        assert_eq!(z_field(&m, 1.0, &[x], &mu, &tm).unwrap()[0], -x);
    }
}

#[test]
fn z_field_matches_the_mean_flow() {
    // κ m̄_T − x + θ1 κ ∂θ1 m̄_T at x = 0, T = 1
    let target = 0.5 * (-0.5f64).exp() + 0.5 * (-0.5 * (-0.5f64).exp());
    assert!((target - 0.15163).abs() < 1e-5);
    let m = ou(0.5, InitialLaw::Point { x: vec![1.0] });
    let n = 4000;
    let cfg = SimConfig::new(n, 10, 1.0, 8, 41, theta(1.0, 1.0));
    let (grid, cloud) = simulate_with_tangents(&m, &cfg).unwrap();
    let mu = grid.snapshot(10);
    let v = cloud.velocities_theta1(10);
    let tm = TangentMeasure::new(&mu, &v).unwrap();
    let z = z_field(&m, 1.0, &[0.0], &mu, &tm).unwrap()[0];
    assert!((z - target).abs() < 5.0 / (n as f64).sqrt(), "{z}");
    // zero velocities leave the direct derivative alone
    let zeros = vec![0.0; n];
    let tm0 = TangentMeasure::new(&mu, &zeros).unwrap();
    let direct = m.d_drift_dtheta1(1.0, &[0.0], &mu)[0];
    assert_eq!(z_field(&m, 1.0, &[0.0], &mu, &tm0).unwrap()[0], direct);
}

/// One transition per particle, `N = 1` perturbation scale.
fn single_transition(delta: f64, seed: u64) -> (mkv_lan::TrajectoryGrid, mkv_lan::BuiltinModel) {
    let m = ou(0.5, InitialLaw::Gaussian { mean: vec![1.0], std: vec![0.7] });
    let cfg = SimConfig::new(10_000, 1, delta, 1, seed, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
    (simulate_particles(&m, &cfg).unwrap(), m)
}

#[test]
fn drift_cells_track_the_exact_score_to_first_order() {
    // (u/√N)∫₀¹ ∂θ1 log p^{θ1(l)} dl is the log-density difference itself
    let rms = |delta: f64| {
        let (grid, m) = single_transition(delta, 5);
        let src = MomentSource::for_model(&m);
        let p = LocalPerturbation::new(theta(1.0, 1.0), 0.5, 0.0, 1, delta).unwrap();
        let cells = zeta_hat_drift(&grid, None, &p, &m, &src, 5).unwrap();
        let sq: Vec<f64> = (0..grid.n_particles())
            .map(|i| {
                let (x, y) = (grid.state(i, 0)[0], grid.state(i, 1)[0]);
                let lp = |t1: f64| {
                    let tr = ou_transition(&theta(t1, 1.0), 0.5, 1.0, 0.0, x, delta).unwrap();
                    ou_log_density(&tr, &[y]).unwrap()
                };
                (cells[i] - (lp(1.5) - lp(1.0))).powi(2)
            })
            .collect();
        mean_var(&sq).0.sqrt()
    };
    let (coarse, fine) = (rms(0.1), rms(0.025));
    let ratio = coarse / fine;
    assert!(ratio > 2.8 && ratio < 5.5, "{coarse} {fine} {ratio}");
}

#[test]
fn zero_directions_give_zero_cells() {
    let (grid, m) = single_transition(0.1, 2);
    let src = MomentSource::for_model(&m);
    let p = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 0.0, 1, 0.1).unwrap();
    assert!(zeta_hat_drift(&grid, None, &p, &m, &src, 5).unwrap().iter().all(|c| *c == 0.0));
    assert!(zeta_hat_diff(&grid, &p, &m, &src, 5).unwrap().iter().all(|c| *c == 0.0));
    let sums = clt_condition_sums(&grid, None, &p, &m, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
    assert_eq!(sums, [0.0; 7]);
    let p = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 0.0, 1, 0.1).unwrap();
    let sums = clt_condition_sums(&grid, None, &p, &m, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
    assert_eq!(&sums[3..], &[0.0; 4]);
    assert!(sums[1] > 0.0);
}

#[test]
fn quadrature_order_barely_matters() {
    let m = ou(0.5, InitialLaw::Gaussian { mean: vec![1.0], std: vec![0.7] });
    let cfg = SimConfig::new(200, 20, 1.0, 1, 8, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
    let grid = simulate_particles(&m, &cfg).unwrap();
    let src = MomentSource::for_model(&m);
    let p = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 1.0, 200, cfg.delta()).unwrap();
    let low = score_breakdown(&grid, None, &p, &m, &src, 3).unwrap();
    let high = score_breakdown(&grid, None, &p, &m, &src, 6).unwrap();
    for (a, b) in [(low.s_b, high.s_b), (low.s_a, high.s_a)] {
        assert!((a - b).abs() < 1e-8 * b.abs(), "{a} {b}");
    }
}

#[test]
fn breakdown_sums_match_the_cells() {
    let m = ou(0.5, InitialLaw::Gaussian { mean: vec![1.0], std: vec![0.7] });
    let cfg = SimConfig::new(30, 5, 1.0, 1, 9, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
    let grid = simulate_particles(&m, &cfg).unwrap();
    let src = MomentSource::for_model(&m);
    let p = LocalPerturbation::new(theta(1.0, 1.0), 0.7, -1.1, 30, cfg.delta()).unwrap();
    let sb = score_breakdown(&grid, None, &p, &m, &src, 5).unwrap();
    let naive_b: f64 = (0..30).flat_map(|i| (0..5).map(move |k| (i, k))).map(|(i, k)| sb.drift_cell(i, k)).sum();
    let naive_a: f64 = (0..30).flat_map(|i| (0..5).map(move |k| (i, k))).map(|(i, k)| sb.diff_cell(i, k)).sum();
    assert!((sb.s_b - naive_b).abs() < 1e-12 * naive_b.abs().max(1.0));
    assert!((sb.s_a - naive_a).abs() < 1e-12 * naive_a.abs().max(1.0));
    assert_eq!(sb.total(), sb.s_b + sb.s_a);
    assert!(sb.quad_b > 0.0 && sb.quad_a > 0.0);
}

fn desk(n_particles: usize, n_steps: usize) -> SimConfig {
    SimConfig::new(n_particles, n_steps, 1.0, 8, 0, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle)
}

#[test]
fn drift_only_lan_limit() {
    let m = stationary_ou();
    let opts = LanOptions { sigma: Some((0.5, 2.0)), ..LanOptions::default() };
    let r = lan_harness(&m, &desk(2000, 50), 1.0, 0.0, 500, 314, &opts).unwrap();
    assert_eq!(r.n_replications, 500);
    assert!((r.mean + 0.25).abs() < 3.0 * r.mean_se, "{} ± {}", r.mean, r.mean_se);
    assert!((r.var - 0.5).abs() < 0.15 * 0.5, "{}", r.var);
}

/// 95% interval of a sample variance under normality.
fn var_interval(values: &[f64]) -> (f64, f64) {
    let (_, var) = mean_var(values);
    let half = 1.96 * var * (2.0 / (values.len() as f64 - 1.0)).sqrt();
    (var - half, var + half)
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

#[test]
fn drift_information_does_not_grow_with_sampling_frequency() {
    let m = stationary_ou();
    let opts = LanOptions { sigma: Some((0.5, 2.0)), ..LanOptions::default() };
    let a = lan_harness(&m, &desk(500, 25), 1.0, 0.0, 300, 21, &opts).unwrap();
    let b = lan_harness(&m, &desk(500, 50), 1.0, 0.0, 300, 22, &opts).unwrap();
    assert!(overlap(var_interval(&a.z_values), var_interval(&b.z_values)), "{} {}", a.var, b.var);
}

#[test]
fn scaled_diffusion_information_does_not_depend_on_the_step() {
    let m = stationary_ou();
    let opts = LanOptions { sigma: Some((0.5, 2.0)), ..LanOptions::default() };
    let a = lan_harness(&m, &desk(500, 25), 0.0, 1.0, 300, 23, &opts).unwrap();
    let b = lan_harness(&m, &desk(500, 50), 0.0, 1.0, 300, 24, &opts).unwrap();
    assert!(overlap(var_interval(&a.z_values), var_interval(&b.z_values)), "{} {}", a.var, b.var);
}
