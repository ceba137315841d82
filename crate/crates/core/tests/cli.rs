use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fedopl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedopl"))
        .args(args)
        .env_remove("FEDOPL_THREADS")
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &TempDir) -> String {
    dir.path().to_string_lossy().into_owned()
}

/// Settings that keep a full experiment under a second.
const SMALL: [&str; 10] = [
    "--set",
    "reference_budget=3000",
    "--set",
    "reference_rounds=50",
    "--set",
    "test_draws=1000",
    "--set",
    "shift_draws=500",
    "--rounds",
    "10",
];

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn homogeneous_smoke_writes_regret_rows() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let res = fedopl(&["experiment", "--scenario", "homogeneous", "--seeds", "1", "--grid", "100", "--out", &out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let regret = read(dir.path(), "regret.csv");
    let lines: Vec<&str> = regret.lines().collect();
    assert_eq!(lines[0], "#fedopl-csv-v1");
    assert_eq!(lines[1], "scenario,n,seed,policy,client,metric,value,se");
    let rows: Vec<Vec<&str>> = lines[2..].iter().map(|l| l.split(',').collect()).collect();
    let policies: Vec<&str> = rows.iter().map(|r| r[3]).collect();
    for p in ["global", "local_0", "local_1", "local_2", "reference"] {
        assert!(policies.contains(&p), "missing policy {p}");
    }
    for r in &rows {
        assert_eq!(r.len(), 8);
        assert_eq!(r[0], "homogeneous");
        assert_eq!(r[1], "100");
        assert!(["global", "0", "1", "2"].contains(&r[4]));
        assert!(["regret", "value"].contains(&r[5]));
        r[6].parse::<f64>().unwrap();
        r[7].parse::<f64>().unwrap();
    }
    for name in ["manifest_resolved.toml", "skewness.csv", "shift.csv", "training_log.csv"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    assert!(!dir.path().join("failures.csv").exists());
}

#[test]
fn diagnose_reports_four_thirds() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let res = fedopl(&["diagnose", "--lambda", "0.5,0.5", "--counts", "25,75", "--out", &out]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("skewness=1.3333333333333333"), "{stdout}");
    let csv = read(dir.path(), "skewness.csv");
    let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "custom");
    assert_eq!(row[1], "100");
    assert_eq!(row[2].parse::<f64>().unwrap(), 4.0 / 3.0);
}

#[test]
fn diagnose_heterogeneous_shift_matches_closed_form() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let res = fedopl(&["diagnose", "--scenario", "heterogeneous", "--set", "shift_draws=200", "--out", &out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let shift = read(dir.path(), "shift.csv");
    let expected = 20.0 * (2.0 - 1.0 - 2f64.ln());
    let mut seen = 0;
    for line in shift.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "0" && f[1] != "0" {
            assert!((f[2].parse::<f64>().unwrap() - expected).abs() < 1e-12);
            seen += 1;
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn missing_manifest_is_a_configuration_error() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let missing = dir.path().join("nope.toml");
    let res = fedopl(&["experiment", "--manifest", &missing.to_string_lossy(), "--out", &out]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let res = fedopl(&["experiment", "--bogus"]);
    assert_eq!(res.status.code(), Some(1));
    let stderr = String::from_utf8(res.stderr).unwrap();
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn invalid_override_is_a_configuration_error() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    assert_eq!(fedopl(&["experiment", "--set", "no_such_key=1", "--out", &out]).status.code(), Some(1));
    assert_eq!(fedopl(&["experiment", "--batch", "0", "--out", &out]).status.code(), Some(1));
    assert_eq!(fedopl(&["experiment", "--lambda-mode", "sideways", "--out", &out]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(fedopl(&["--help"]).status.code(), Some(0));
}

#[test]
fn manifest_file_round_trips_through_resolved_output() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let mut args = vec!["experiment", "--scenario", "heterogeneous", "--seeds", "1", "--grid", "100"];
    args.extend(SMALL);
    let first_s = first.to_string_lossy().into_owned();
    let res = fedopl(&[args.as_slice(), &["--out", &first_s]].concat());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let manifest = first.join("manifest_resolved.toml");
    let manifest_s = manifest.to_string_lossy().into_owned();
    let second_s = second.to_string_lossy().into_owned();
    let res = fedopl(&["experiment", "--manifest", &manifest_s, "--out", &second_s]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for name in ["manifest_resolved.toml", "regret.csv", "skewness.csv", "shift.csv", "training_log.csv"] {
        assert_eq!(read(&first, name), read(&second, name), "{name} differs");
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let mut dirs = Vec::new();
    for threads in ["1", "3"] {
        let path = dir.path().join(threads).to_string_lossy().into_owned();
        let mut args = vec!["experiment", "--scenario", "homogeneous", "--seeds", "2", "--grid", "100,200"];
        args.extend(SMALL);
        args.extend(["--threads", threads, "--out", &path]);
        let res = fedopl(&args);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        dirs.push(path);
    }
    for name in ["manifest_resolved.toml", "regret.csv", "skewness.csv", "shift.csv", "training_log.csv"] {
        let a = fs::read(Path::new(&dirs[0]).join(name)).unwrap();
        let b = fs::read(Path::new(&dirs[1]).join(name)).unwrap();
        assert!(a == b, "{name} differs between thread counts");
    }
}

#[test]
fn stage_commands_write_their_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = out_arg(&dir);
    let res = fedopl(&["aipw", "--scenario", "homogeneous", "--n", "90", "--out", &out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let scores = read(dir.path(), "scores.csv");
    assert_eq!(scores.lines().nth(1).unwrap(), "client,index,fold,score_0,score_1,score_2,score_3");
    assert_eq!(scores.lines().count(), 2 + 90);

    let res = fedopl(&["fedopl", "--scenario", "homogeneous", "--n", "90", "--rounds", "5", "--threaded", "--out", &out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let policy = read(dir.path(), "policy.csv");
    assert_eq!(policy.lines().count(), 2 + 4);
    assert_eq!(read(dir.path(), "training_log.csv").lines().count(), 2 + 5);
}
