use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rfmfg_cli::{parse_config, run, status, RunOptions};

const SMALL_A: &str = "experiment = \"a\"\nd = 2\nsigma = 1.25\nagents = 6\ntime_steps = 5\nr = 16\n";

fn rfmfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfmfg")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn run_with(text: &str, dir: &Path) -> Output {
    let config = write_config(dir, text);
    let out = dir.join("out").display().to_string();
    rfmfg(&["run", "--config", &config, "--out", &out, "--threads", "1"])
}

#[test]
fn converged_run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_with(SMALL_A, dir.path());
    assert_eq!(output.status.code(), Some(status::CONVERGED as i32), "{output:?}");
    let out = dir.path().join("out");
    for name in [
        "resolved_config.toml",
        "trajectories.csv",
        "cost_report.json",
        "residual_history.csv",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().next(), Some("agent,step,t,x1,x2"));
    assert_eq!(traj.lines().count(), 1 + 6 * 5);
    let history = fs::read_to_string(out.join("residual_history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("iteration,residual,objective"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cost_report.json")).unwrap()).unwrap();
    let parts = ["running", "interaction", "terminal"].map(|k| report[k].as_f64().unwrap());
    let total = report["total"].as_f64().unwrap();
    assert!((parts.iter().sum::<f64>() - total).abs() <= 1e-12 * total);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.lines().last().unwrap().starts_with("converged after"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_with(SMALL_A, dir.path()).status.code(), Some(0));
    let out = dir.path().join("out");
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    let again = tempfile::tempdir().unwrap();
    let config = write_config(again.path(), &resolved);
    let out2 = again.path().join("out").display().to_string();
    assert_eq!(
        rfmfg(&["run", "--config", &config, "--out", &out2]).status.code(),
        Some(0)
    );
    for name in ["cost_report.json", "trajectories.csv"] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(again.path().join("out").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn serial_runs_are_byte_identical() {
    let config = parse_config(&format!(
        "{SMALL_A}[solver]\ncontrol_init = \"random\"\ndual_init = \"random\"\n"
    ))
    .unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outcomes: Vec<_> = dirs
        .iter()
        .map(|d| {
            let options = RunOptions {
                output_dir: Some(d.path().to_path_buf()),
                threads: Some(1),
                quiet: true,
            };
            run(&config, &options).unwrap()
        })
        .collect();
    assert_eq!(outcomes[0].cost_report, outcomes[1].cost_report);
    for name in ["cost_report.json", "trajectories.csv", "residual_history.csv"] {
        assert_eq!(
            fs::read(dirs[0].path().join(name)).unwrap(),
            fs::read(dirs[1].path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn preset_c_records_the_scaled_width() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment = \"c\"\nd = 50\nsigma_hat = 0.2\nagents = 4\ntime_steps = 3\nr = 8\n[solver]\nmax_iterations = 1\n";
    let output = run_with(text, dir.path());
    assert_eq!(output.status.code(), Some(status::NOT_CONVERGED as i32));
    let resolved = fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    let value: toml::Table = resolved.parse().unwrap();
    assert_eq!(value["sigma"].as_float(), Some(1.0));
    assert_eq!(value["sigma_hat"].as_float(), Some(0.2));
}

#[test]
fn json_trajectories_and_optional_exports() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL_A}[exports]\ntrajectory_format = \"json\"\ncost_report = false\nkernel_error_curve = true\nkernel_slice = true\n\
         [kernel_bench]\nr_values = [8, 16]\nseeds = [0, 1]\ngrid_per_axis = 5\nslice_points = 11\n"
    );
    assert_eq!(run_with(&text, dir.path()).status.code(), Some(0));
    let out = dir.path().join("out");
    assert!(out.join("trajectories.json").is_file());
    assert!(!out.join("trajectories.csv").exists());
    assert!(!out.join("cost_report.json").exists());
    let curve = fs::read_to_string(out.join("kernel_error_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("r,seed,linf,l2"));
    assert_eq!(curve.lines().count(), 1 + 4);
    let slice = fs::read_to_string(out.join("kernel_slice.csv")).unwrap();
    assert_eq!(slice.lines().next(), Some("s,exact,approx"));
    assert_eq!(slice.lines().count(), 1 + 11);
}

#[test]
fn kernel_bench_writes_curve_and_slice() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "experiment = \"c\"\nd = 10\n[kernel_bench]\nr_values = [16]\nseeds = [0]\nsample_points = 50\nslice_points = 21\n",
    );
    let out = dir.path().join("bench").display().to_string();
    let output = rfmfg(&["kernel-bench", "--config", &config, "--out", &out]);
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    for name in ["kernel_error_curve.csv", "kernel_slice.csv", "resolved_config.toml"] {
        assert!(dir.path().join("bench").join(name).is_file(), "{name}");
    }
}

#[test]
fn configuration_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("experiment = \"a\"\nbogus = 1\n", "bogus"),
        ("experiment = \"a\"\nagents = \"many\"\n", "agents"),
        ("experiment = \"custom\"\n", ""),
        ("experiment = \"a\"\n[solver]\nh_v = -1.0\n", ""),
    ] {
        let output = run_with(text, dir.path());
        assert_eq!(output.status.code(), Some(status::USAGE as i32), "{text}");
        let stderr = String::from_utf8(output.stderr).unwrap();
        assert!(stderr.contains(needle), "{stderr}");
    }
    let missing = rfmfg(&["run", "--config", "/no/such/config.toml"]);
    assert_eq!(missing.status.code(), Some(status::USAGE as i32));
    assert_eq!(rfmfg(&["run"]).status.code(), Some(status::USAGE as i32));
    assert_eq!(rfmfg(&["--version"]).status.code(), Some(0));
}

#[test]
fn stopping_early_and_diverging_have_distinct_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let early = run_with(&format!("{SMALL_A}[solver]\nmax_iterations = 2\n"), dir.path());
    assert_eq!(early.status.code(), Some(status::NOT_CONVERGED as i32));
    assert!(dir.path().join("out/cost_report.json").is_file());
    let diverged = run_with(&format!("{SMALL_A}[solver]\nh_v = 1000.0\n"), dir.path());
    assert_eq!(diverged.status.code(), Some(status::DIVERGED as i32), "{diverged:?}");
}

#[test]
fn unwritable_output_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let config = write_config(dir.path(), SMALL_A);
    let out = blocker.join("out").display().to_string();
    let output = rfmfg(&["run", "--config", &config, "--out", &out]);
    assert_eq!(output.status.code(), Some(status::IO as i32), "{output:?}");
}
