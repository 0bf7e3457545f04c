use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2ldp")).args(args).current_dir(dir).output().unwrap()
}

fn write_config(dir: &Path, text: &str) {
    std::fs::write(dir.join("experiment.toml"), text).unwrap();
}

#[test]
fn skeleton_writes_outputs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[fluid]\nmodes = 4\n[solver]\ndt = 0.01\n");
    let out = run(&["skeleton", "--config", "experiment.toml", "--out", "run"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = tmp.path().join("run");
    for name in ["trajectory.csv", "energy_residual.csv", "final_state.csv", "summary.txt", "config.toml", "manifest.toml"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    let manifest: toml::Table = std::fs::read_to_string(run_dir.join("manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["subcommand"].as_str(), Some("skeleton"));
    assert_eq!(manifest["passed"].as_bool(), Some(true));
    assert!(manifest["files"].as_table().unwrap().contains_key("trajectory.csv"));
    let rows = std::fs::read_to_string(run_dir.join("trajectory.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 102);
}

#[test]
fn overrides_change_the_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[fluid]\nmodes = 4\n");
    let out = run(
        &["skeleton", "--config", "experiment.toml", "--set", "solver.dt=0.02", "--set", "horizon=0.5", "--out", "o"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let effective: toml::Table = std::fs::read_to_string(tmp.path().join("o/config.toml")).unwrap().parse().unwrap();
    assert_eq!(effective["solver"]["dt"].as_float(), Some(0.02));
    assert_eq!(effective["horizon"].as_float(), Some(0.5));
}

#[test]
fn config_errors_exit_with_two_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[fluid]\nmodez = 4\n");
    let out = run(&["skeleton", "--config", "experiment.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("o").exists());

    let out = run(&["skeleton", "--config", "absent.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    write_config(tmp.path(), "[controls]\nf_values = [1.0, 2.0, 3.0]\n");
    let out = run(&["skeleton", "--config", "experiment.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stochastic_subcommands_require_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[fluid]\nmodes = 4\n");
    let out = run(&["simulate", "--config", "experiment.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn seeded_simulation_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "seed = 5\n[fluid]\nmodes = 4\n[solver]\ndt = 0.01\n");
    let args = |out: &'static str| ["simulate", "--config", "experiment.toml", "--out", out];
    for o in ["a", "b"] {
        assert!(run(&args(o), tmp.path()).status.success());
    }
    let c_args = ["simulate", "--config", "experiment.toml", "--set", "seed=6", "--out", "c"];
    assert!(run(&c_args, tmp.path()).status.success());
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("trajectory.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
