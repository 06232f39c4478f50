use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mkv_lan_cli::config::ExperimentConfig;
use mkv_lan_cli::plot::histogram;
use proptest::prelude::*;

const BASE: &str = r#"
[model]
id = "mean_field_ou"

[theta]
theta1 = 1.0
theta2 = 1.0

[simulate]
n_particles = 80
n_steps = 10
mode = { kind = "exact_oracle" }

[lan]
u = 1.0
v = 1.0
replications = 20
sigma = [0.5, 2.0]

[rates]
ns = [20, 80, 320]
n_steps = [5, 10, 20]
reps = 3

[validate]
probes = 5
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn mkv(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkv-lan"))
        .args(&args[..1])
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .env_remove("MKV_LAN_THREADS")
        .output()
        .unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn unknown_model_id_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("mean_field_ou", "no_such_model"));
    let out = mkv(&["simulate", "--seed", "1"], &cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.id"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_seed_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = mkv(&["simulate"], &cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn lan_check_writes_a_report_with_ks_pvalue() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let dir = tmp.path().join("out");
    let out = mkv(&["lan-check", "--seed", "5", "--threads", "2"], &cfg, &dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("lan_report.json")).unwrap()).unwrap();
    assert!(report["ks_pvalue"].as_f64().is_some_and(|p| (0.0..=1.0).contains(&p)));
    assert_eq!(report["n_replications"].as_u64(), Some(20));
    let prov: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("provenance.json")).unwrap()).unwrap();
    let listed: Vec<&str> = prov["outputs"].as_array().unwrap().iter().map(|o| o["file"].as_str().unwrap()).collect();
    for f in std::fs::read_dir(&dir).unwrap() {
        let name = f.unwrap().file_name().to_string_lossy().into_owned();
        assert!(name == "provenance.json" || listed.contains(&name.as_str()), "{name} not listed");
    }
}

#[test]
fn identical_runs_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    for cmd in ["simulate", "lan-check", "fisher"] {
        let (a, b) = (tmp.path().join(format!("{cmd}-a")), tmp.path().join(format!("{cmd}-b")));
        assert!(mkv(&[cmd, "--seed", "9", "--format", "csv"], &cfg, &a).status.success());
        assert!(mkv(&[cmd, "--seed", "9", "--format", "csv"], &cfg, &b).status.success());
        let (ca, cb) = (csv_files(&a), csv_files(&b));
        assert!(!ca.is_empty());
        assert_eq!(ca, cb, "{cmd}");
    }
}

#[test]
fn commands_write_only_into_their_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), BASE);
    for cmd in ["simulate", "lan-check", "fisher", "estimate", "rates", "validate-model"] {
        let out = Command::new(env!("CARGO_BIN_EXE_mkv-lan"))
            .args([cmd, "--config", "config.toml", "--out", cmd, "--seed", "3"])
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut entries: Vec<String> =
        std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    entries.sort();
    assert_eq!(entries, ["config.toml", "estimate", "fisher", "lan-check", "rates", "simulate", "validate-model"]);
}

#[test]
fn failed_runs_leave_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[estimate]\ndata = \"missing.bin\"\n");
    let cfg = write_config(tmp.path(), &text);
    let dir = tmp.path().join("out");
    let out = mkv(&["estimate", "--seed", "1"], &cfg, &dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimate.data"));
    assert!(!dir.exists());
}

#[test]
fn simulated_grid_can_be_re_estimated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    assert!(mkv(&["simulate", "--seed", "4"], &cfg, &tmp.path().join("sim")).status.success());
    let text = format!("{BASE}\n[estimate]\ndata = \"sim/trajectories.bin\"\n");
    let cfg = write_config(tmp.path(), &text);
    let out = mkv(&["estimate", "--seed", "4"], &cfg, &tmp.path().join("est"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("est/estimate.json").exists());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ExperimentConfig::from_str_with_format(BASE, false).unwrap();
    let again = ExperimentConfig::from_str_with_format(&cfg.to_toml().unwrap(), false).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn help_exits_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_mkv-lan")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_mkv-lan")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn five_hundred_values_in_thirty_bins_carry_unit_mass() {
    let values: Vec<f64> = (0..500).map(|i| ((i * 7919) % 500) as f64 / 100.0 - 2.5).collect();
    let bins = histogram(&values, -1.0, 2.0, 30);
    assert_eq!(bins.len(), 30);
    let width = 5.0 / 30.0 * (499.0 / 500.0);
    let mass: f64 = bins.iter().map(|b| b.target_density * width).sum();
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 500);
}

proptest! {
    #[test]
    fn histogram_mass_is_one(values in prop::collection::vec(-20.0..20.0f64, 2..300), mean in -3.0..3.0f64, var in 0.1..9.0f64, nb in 1usize..60) {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi > lo);
        let bins = histogram(&values, mean, var, nb);
        let width = (hi - lo) / nb as f64;
        let mass: f64 = bins.iter().map(|b| b.target_density * width).sum();
        // a span far in the normal tail can carry no mass at all
        prop_assert!((mass - 1.0).abs() < 1e-6 || mass == 0.0, "{}", mass);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), values.len());
    }
}
