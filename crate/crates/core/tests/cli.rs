use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn write_config(dir: &Path, name: &str, manifold: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("[manifold]\n{manifold}\n{extra}")).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genconserve"))
        .args(args)
        .arg(config)
        .output()
        .expect("binary runs")
}

const EUCLIDEAN: &str = "dimension = 2\nsigma = \"r\"\nrho = \"1\"\npotential = \"0\"";
const INCOMPLETE: &str = "dimension = 2\nsigma = \"r*exp(r^3)\"\nrho = \"1\"\npotential = \"0\"";

#[test]
fn analyze_euclidean_exits_zero() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("csv");
    let cfg = write_config(
        dir.path(),
        "plane.cfg",
        EUCLIDEAN,
        &format!("[outputs]\ncsv_dir = \"{}\"\n", csv.display()),
    );
    let out = run(&["analyze"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("final: conservative_generalized"), "{text}");
    let sweep = fs::read_to_string(csv.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 4);
    assert!(sweep.starts_with("R,H_origin,N_origin\r\n"));
}

#[test]
fn volume_test_on_incomplete_model_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "inc.cfg", INCOMPLETE, "");
    let out = run(&["volume-test"], &cfg);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn semigroup_with_zero_horizon_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", EUCLIDEAN, "[numerics]\nt_end = 0\n");
    let out = run(&["semigroup"], &cfg);
    assert_eq!(out.status.code(), Some(11));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t_end"));
}

#[test]
fn duplicate_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "dup.cfg", EUCLIDEAN, "sigma = \"r\"\n");
    let out = run(&["analyze"], &cfg);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 6"));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["analyze"], &dir.path().join("nope.cfg"));
    assert_eq!(out.status.code(), Some(13));
}

#[test]
fn semigroup_csv_has_one_row_per_snapshot_and_node() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "plane.cfg",
        EUCLIDEAN,
        &format!(
            "[numerics]\nradii = 4, 6\nnodes = 128\nt_end = 0.1\ndt = 1e-3\n[outputs]\ncsv_dir = \"{}\"\n",
            csv.display()
        ),
    );
    let out = run(&["semigroup"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = fs::read_to_string(csv.join("semigroup.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 101 * 129);
}

#[test]
fn build_potential_flips_the_incomplete_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "inc.cfg", INCOMPLETE, "[numerics]\nradii = 4, 5, 6\n");
    let out = run(&["build-potential"], &cfg);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("potential: piecewise(1.0, 0.0,"), "{text}");
}

#[test]
fn khasminskii_agrees_across_alpha() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "inc.cfg", INCOMPLETE, "[numerics]\nalpha = 0.5, 1, 2\n");
    let out = run(&["khasminskii"], &cfg);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_is_deterministic_apart_from_the_timestamp() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.txt");
    let cfg = write_config(
        dir.path(),
        "inc.cfg",
        INCOMPLETE,
        &format!(
            "[numerics]\nradii = 4, 5\n[outputs]\nreport = \"{}\"\n",
            report.display()
        ),
    );
    let body = |s: String| s.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap();
    let first = run(&["analyze"], &cfg);
    assert_eq!(first.status.code(), Some(1));
    let saved = fs::read_to_string(&report).unwrap();
    let second = run(&["analyze"], &cfg);
    let a = body(String::from_utf8(first.stdout).unwrap());
    assert_eq!(a, body(String::from_utf8(second.stdout).unwrap()));
    assert_eq!(a, body(saved));
    assert!(a.contains("final = not_conservative"));
}
