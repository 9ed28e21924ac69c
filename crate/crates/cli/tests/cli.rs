//! End-to-end tests of the binary: flag handling, config-file merging, exit
//! codes, and the output contracts of the three subcommands.

use std::io::Write as _;
use std::process::{Command, Output};

const TWO_PI_SQ: f64 = 19.739208802178716;

const STUDY_HEADER: &str =
    "level,ndof,j,lambda_mg,lambda_dir,err_lambda_exact,err_energy,theta_measured,alpha,matvec_total,wall_seconds";

fn eigmg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eigmg"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("utf-8 output")
}

#[test]
fn solve_report_converges_on_the_unit_square() {
    let out = eigmg(&["solve", "--n", "8", "--levels", "4"]);
    let report: serde_json::Value =
        serde_json::from_str(&stdout_of(&out)).expect("valid JSON report");
    let lambda = report["lambdas"][0].as_f64().unwrap();
    assert!(lambda > TWO_PI_SQ && lambda < TWO_PI_SQ + 1.0, "lambda {lambda}");
    assert_eq!(report["per_level"].as_array().unwrap().len(), 4);
    assert_eq!(report["shift_mode"], "paper");
    assert_eq!(report["nev"], 1);
    assert!(report["matvec_total"].as_u64().unwrap() > 0);
    assert!(report["traces"].as_array().unwrap().len() >= 3);
    // vectors appear only on request
    assert!(report.get("vectors").is_none());
}

#[test]
fn vector_dump_matches_the_finest_dimension() {
    let out = eigmg(&["solve", "--n", "4", "--levels", "2", "--dump-vectors"]);
    let report: serde_json::Value =
        serde_json::from_str(&stdout_of(&out)).expect("valid JSON report");
    let ndof = report["ndof"].as_u64().unwrap() as usize;
    let vectors = report["vectors"].as_array().unwrap();
    assert_eq!(vectors.len(), 1);
    assert_eq!(vectors[0].as_array().unwrap().len(), ndof);
}

#[test]
fn single_level_compare_equals_the_direct_solve() {
    let out = eigmg(&["compare", "--n", "4", "--levels", "1", "--no-timing"]);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    // level,ndof,lambda_mg,lambda_dir,mg_matvec,dir_matvec,mg_seconds,dir_seconds
    assert_eq!(fields[0], "1");
    assert_eq!(fields[2], fields[3], "one level means the same dense solve");
    assert_eq!(fields[4], "0");
    assert_eq!(fields[5], "0");
    assert_eq!(fields[6], "0.000");
    assert_eq!(fields[7], "0.000");
}

#[test]
fn sigma_at_or_below_one_is_a_config_error() {
    let out = eigmg(&["solve", "--sigma", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sigma must exceed 1"), "stderr: {err}");
}

#[test]
fn unknown_problem_is_a_config_error() {
    let out = eigmg(&["solve", "--problem", "poisson"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown problem"), "stderr: {err}");
}

#[test]
fn study_emits_the_fixed_header_and_one_row_per_level_and_index() {
    let out = eigmg(&["study", "--n", "8", "--levels", "4", "--nev", "6", "--no-timing"]);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], STUDY_HEADER);
    assert_eq!(lines.len(), 1 + 4 * 6);
    // the ground eigenvalue error shrinks strictly with every refinement
    let mut previous = f64::INFINITY;
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 11);
        if fields[2] != "1" {
            continue;
        }
        let err: f64 = fields[5].parse().expect("analytic error present");
        assert!(err > 0.0 && err < previous, "err {err} previous {previous}");
        previous = err;
    }
}

#[test]
fn study_bytes_are_reproducible_with_timing_off() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        let out = eigmg(&[
            "study",
            "--n",
            "4",
            "--levels",
            "3",
            "--nev",
            "2",
            "--no-timing",
            "--seed",
            "7",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn general_problem_study_reports_extrapolated_errors() {
    let out = eigmg(&[
        "study",
        "--problem",
        "general-ex2",
        "--n",
        "4",
        "--levels",
        "3",
        "--nev",
        "2",
        "--no-timing",
    ]);
    let text = stdout_of(&out);
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let err: f64 = fields[5].parse().expect("extrapolated error present");
        assert!(err > 0.0);
        assert!(fields[6].is_empty(), "no analytic energy reference exists");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "# smoke-run defaults").unwrap();
    writeln!(f, "problem=laplace").unwrap();
    writeln!(f, "n=4").unwrap();
    writeln!(f, "levels=3").unwrap();
    writeln!(f, "nev=2").unwrap();
    writeln!(f, "no-timing=true").unwrap();
    drop(f);
    let out = eigmg(&["solve", "--config", path.to_str().unwrap(), "--levels", "2"]);
    let report: serde_json::Value =
        serde_json::from_str(&stdout_of(&out)).expect("valid JSON report");
    assert_eq!(report["levels"], 2, "the flag outranks the file");
    assert_eq!(report["nev"], 2, "unset flags fall back to the file");
    assert_eq!(report["wall_seconds"], 0.0);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "bogus=1\n").unwrap();
    let out = eigmg(&["solve", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown config key"), "stderr: {err}");
}

#[test]
fn mesh_file_input_drives_the_hierarchy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cross.mesh");
    std::fs::write(
        &path,
        "# unit square split into four triangles around the center\n\
         5 4\n\
         0 0 1\n\
         1 0 1\n\
         1 1 1\n\
         0 1 1\n\
         0.5 0.5 0\n\
         0 1 4\n\
         1 2 4\n\
         2 3 4\n\
         3 0 4\n",
    )
    .unwrap();
    let out = eigmg(&[
        "solve",
        "--mesh-file",
        path.to_str().unwrap(),
        "--levels",
        "2",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&stdout_of(&out)).expect("valid JSON report");
    // still the unit square, so the min-max bound applies
    assert!(report["lambdas"][0].as_f64().unwrap() > TWO_PI_SQ);
    assert_eq!(report["mesh"]["file"], path.to_str().unwrap());
}

#[test]
fn log_filter_env_var_is_honored() {
    let out = Command::new(env!("CARGO_BIN_EXE_eigmg"))
        .args(["study", "--n", "4", "--levels", "2", "--no-timing"])
        .env("EIGMG_LOG", "info")
        .output()
        .expect("binary launches");
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("direct reference"), "stderr: {err}");
}
