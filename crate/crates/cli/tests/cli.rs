//! End-to-end tests of the command-line interface: exit codes, file
//! formats, determinism, and the truncation contract.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_algeo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn list_scenarios_names_all_six() {
    let out = run(&["list-scenarios"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for name in [
        "heisenberg",
        "grushin",
        "holonomic",
        "nonholonomic",
        "grushin3d",
        "kropina",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
}

#[test]
fn validate_passes_for_builtin_scenarios() {
    for name in ["heisenberg", "nonholonomic", "grushin", "kropina"] {
        let out = run(&["validate", "--scenario", name]);
        assert_eq!(code(&out), 0, "{name}: {}", stdout(&out));
        assert!(stdout(&out).contains("PASS"));
    }
}

#[test]
fn validate_rejects_bad_configuration() {
    let out = run(&[
        "validate",
        "--scenario",
        "heisenberg",
        "--param",
        "epsilon=1.5",
    ]);
    assert_eq!(code(&out), 2);

    let out = run(&["validate", "--scenario", "moebius"]);
    assert_eq!(code(&out), 2);

    let out = run(&["validate", "--scenario", "heisenberg", "--param", "warp=1"]);
    assert_eq!(code(&out), 2);

    let out = run(&[
        "validate",
        "--scenario",
        "heisenberg",
        "--param",
        "epsilon=brisk",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn geodesic_grushin_endpoint_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    let out = run(&[
        "geodesic",
        "--scenario",
        "grushin",
        "--param",
        "epsilon=0",
        "--t-end",
        "1.5707963",
        "--dt",
        "0.001",
        "--format",
        "csv",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,mu1,mu2,H");
    let last = text.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cols[1] - 1.0).abs() <= 1e-6, "x1 endpoint {}", cols[1]);
    assert!(
        (cols[2] - std::f64::consts::FRAC_PI_4).abs() <= 1e-6,
        "x2 endpoint {}",
        cols[2]
    );
    // summary goes to stdout when writing to a file
    assert!(stdout(&out).contains("endpoint"));
}

#[test]
fn geodesic_single_step_run_has_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.csv");
    let out = run(&[
        "geodesic",
        "--scenario",
        "heisenberg",
        "--t-end",
        "0.001",
        "--dt",
        "0.001",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3); // header + 2 rows
}

#[test]
fn geodesic_kropina_reference_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kropina.csv");
    let out = run(&[
        "geodesic",
        "--scenario",
        "kropina",
        "--t-end",
        "2.5707963",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    let last = text.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cols[1] - 1.0).abs() <= 1e-6);
    assert!((cols[2] - 0.7853981).abs() <= 1e-6);
}

#[test]
fn geodesic_csv_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.csv");
    let p2 = dir.path().join("b.csv");
    for p in [&p1, &p2] {
        let out = run(&[
            "geodesic",
            "--scenario",
            "holonomic",
            "--t-end",
            "1.0",
            "--seed",
            "42",
            "-o",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "identical configs must give byte-identical csv"
    );
}

#[test]
fn geodesic_past_kropina_singularity_truncates() {
    // The kropina geodesic meets the singular momentum set at t = pi; with
    // this step the stage evaluations land close enough to it for the
    // gradients to blow past the divergence guard.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.csv");
    let out = run(&[
        "geodesic",
        "--scenario",
        "kropina",
        "--t-end",
        "4.0",
        "--dt",
        "0.0002",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.trim_end().ends_with("# TRUNCATED"), "missing marker");
    assert!(text.lines().count() > 10, "partial data expected");
}

#[test]
fn geodesic_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.json");
    let out = run(&[
        "geodesic",
        "--scenario",
        "heisenberg",
        "--t-end",
        "0.1",
        "--dt",
        "0.01",
        "--format",
        "json",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(value["meta"]["scenario"], "heisenberg");
    assert_eq!(value["meta"]["dt"], 0.01);
    assert_eq!(value["truncated"], false);
    assert_eq!(value["columns"][0], "t");
    let rows = value["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0].as_array().unwrap().len(), 1 + 3 + 3 + 1);
}

#[test]
fn compare_exit_codes() {
    // reference run passes
    let out = run(&["compare", "--scenario", "heisenberg"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));

    // holonomic reference passes on relative error
    let out = run(&["compare", "--scenario", "holonomic", "--t-end", "1.0"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));

    // a coarse step exceeds the tolerance
    let out = run(&["compare", "--scenario", "heisenberg", "--dt", "0.5"]);
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));

    // no closed form for the nonholonomic Randers case
    let out = run(&[
        "compare",
        "--scenario",
        "nonholonomic",
        "--param",
        "epsilon=0.2",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn connection_holonomic_closed_form() {
    let out = run(&[
        "connection",
        "--scenario",
        "holonomic",
        "--point",
        "1,1,0",
        "--fiber",
        "1,1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("connection N[b][a]:"));
    assert!(text.contains("(1.000000000, 0.000000000)"), "{text}");
    assert!(text.contains("(-1.000000000, 0.000000000)"), "{text}");
}

#[test]
fn connection_json_and_symmetry_residual() {
    let out = run(&["connection", "--scenario", "heisenberg", "--format", "json"]);
    assert_eq!(code(&out), 0);
    let value: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(value["scenario"], "heisenberg");
    let resid = value["dual_symmetry_residual"].as_f64().unwrap();
    assert!(resid <= 1e-8, "symmetry residual {resid}");
}

#[test]
fn connection_regularity_failure_is_exit_3() {
    // The diagnostic metric of the kropina scenario degenerates on x1 = 0.
    let out = run(&[
        "connection",
        "--scenario",
        "kropina",
        "--point",
        "0,0",
        "--fiber",
        "1,0",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_params_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("params.cfg");
    std::fs::write(&cfg, "# reference setup\nepsilon = 1.5\nlambda = 2.0\n").unwrap();

    // config alone: epsilon out of domain
    let out = run(&[
        "validate",
        "--scenario",
        "heisenberg",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);

    // the flag overrides the config value
    let out = run(&[
        "validate",
        "--scenario",
        "heisenberg",
        "--config",
        cfg.to_str().unwrap(),
        "--param",
        "epsilon=0.2",
    ]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn geodesic_rejects_bad_steps() {
    let out = run(&[
        "geodesic",
        "--scenario",
        "heisenberg",
        "--t-end",
        "0.0005",
        "--dt",
        "0.001",
    ]);
    assert_eq!(code(&out), 2);
    assert!(!Path::new("out.csv").exists());
}
