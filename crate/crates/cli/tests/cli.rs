use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twostage_cli::report::{read_csv, write_csv};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twostage"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

// deterministic noise in [-0.5, 0.5)
fn wobble(i: usize, j: usize) -> f64 {
    ((i * 7919 + j * 104_729 + 13) % 1000) as f64 / 1000.0 - 0.5
}

/// Mixed sizes 2..=5, alternating assignment, a covariate that drives
/// most of the outcome variation.
fn mixed_fixture(households: usize) -> String {
    let mut s = String::from("household_id,individual_id,h,z,y,x\n");
    for i in 0..households {
        let n = 2 + (i / 2) % 4;
        let treated = i % 2 == 0;
        for j in 0..n {
            let x = ((i * 31 + j * 17) % 23) as f64;
            let z = treated && j == 0;
            let effect = if z { 1.5 } else if treated { 0.7 } else { 0.0 };
            let y = 1.0 + 2.0 * x + effect + 0.3 * wobble(i, j);
            let _ = writeln!(s, "h{i},{j},{},{},{y},{x}", u8::from(treated), u8::from(z));
        }
    }
    s
}

fn holdout_fixture() -> String {
    let mut s = String::from("household_id,individual_id,y,x\n");
    for i in 0..40 {
        for j in 0..3 {
            let x = ((i * 13 + j * 7) % 23) as f64;
            let _ = writeln!(s, "k{i},{j},{},{x}", 1.0 + 2.0 * x + 0.3 * wobble(i + 500, j));
        }
    }
    s
}

const WORKED: &str = "household_id,individual_id,h,z,y\n1,1,1,1,5\n1,2,1,0,3\n2,1,0,0,1\n2,2,0,0,2\n";

#[test]
fn worked_example_points() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "worked.csv", WORKED);
    let out = run(&["analyze", "--input", input.to_str().unwrap(), "--format", "csv", "--estimators", "unbiased"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let expected = if r.effect == "primary" { 3.5 } else { 1.5 };
        assert_eq!(r.point, expected, "{r:?}");
        assert_eq!(r.se, None);
    }
    assert!(rows.iter().any(|r| r.scheme == "HW") && rows.iter().any(|r| r.scheme == "IW"));
}

#[test]
fn default_table_lists_both_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "mixed.csv", &mixed_fixture(40));
    let out = run(&["analyze", "--input", input.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("households (N): 40"));
    for scheme in ["HW", "IW"] {
        for effect in ["primary", "spillover"] {
            let hit = text
                .lines()
                .any(|l| l.starts_with(effect) && l.split_whitespace().nth(1) == Some(scheme));
            assert!(hit, "no {scheme} {effect} row in\n{text}");
        }
    }
    assert!(text.contains("simple-difference") && text.contains("regression") && text.contains("hajek"));
}

#[test]
fn post_stratified_rows_per_stratum() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "mixed.csv", &mixed_fixture(48));
    let out = run(&[
        "analyze",
        "--input",
        input.to_str().unwrap(),
        "--post-stratify",
        "2,3,4-7",
        "--estimators",
        "post-stratified",
        "--scheme",
        "iw",
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    let strata: Vec<&str> = rows.iter().filter(|r| r.effect == "primary").map(|r| r.stratum.as_str()).collect();
    assert_eq!(strata, ["all", "2", "3", "4-7"]);
    let pooled = &rows[0];
    let parts: usize = rows[1..4].iter().map(|r| r.individuals).sum();
    assert_eq!(parts, pooled.individuals);
}

#[test]
fn model_assisted_reduces_standard_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "mixed.csv", &mixed_fixture(40));
    let holdout = write(dir.path(), "holdout.csv", &holdout_fixture());
    let out = run(&[
        "analyze",
        "--input",
        input.to_str().unwrap(),
        "--holdout",
        holdout.to_str().unwrap(),
        "--covariates",
        "x",
        "--estimators",
        "unbiased,model-assisted",
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    for scheme in ["HW", "IW"] {
        for effect in ["primary", "spillover"] {
            let se = |est: &str| {
                rows.iter()
                    .find(|r| r.scheme == scheme && r.effect == effect && r.estimator == est)
                    .and_then(|r| r.se)
                    .unwrap()
            };
            assert!(se("model-assisted") <= se("unbiased"), "{scheme} {effect}");
        }
    }
}

#[test]
fn machine_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "mixed.csv", &mixed_fixture(40));
    let out_dir = dir.path().join("out");
    let out = run(&[
        "analyze",
        "--input",
        input.to_str().unwrap(),
        "--effects",
        "primary,spillover,overall",
        "--estimators",
        "unbiased,hajek",
        "--format",
        "csv",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(out_dir.join("analysis.csv")).unwrap(), out.stdout);
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    let mut again = Vec::new();
    write_csv(&rows, &mut again).unwrap();
    assert_eq!(again, out.stdout);
    // every numeric field keeps at least 12 significant digits
    for r in &rows {
        for v in [Some(r.point), r.se, r.ci_lower, r.ci_upper, r.variance].into_iter().flatten() {
            let printed: f64 = format!("{v:.11e}").parse().unwrap();
            assert!((printed - v).abs() <= 1e-11 * v.abs());
        }
    }

    let out = run(&["analyze", "--input", input.to_str().unwrap(), "--format", "jsonl"]);
    assert!(out.status.success());
    let rows_json = twostage_cli::report::read_jsonl(out.stdout.as_slice()).unwrap();
    assert!(!rows_json.is_empty());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "mixed.csv", &mixed_fixture(40));
    let cfg = write(
        dir.path(),
        "run.cfg",
        &format!("# analysis\ninput = {}\nscheme = hw\nformat = csv\nestimators = unbiased\n", input.display()),
    );
    let out = run(&["analyze", "--config", cfg.to_str().unwrap(), "--scheme", "iw"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_csv(out.stdout.as_slice()).unwrap();
    assert!(rows.iter().all(|r| r.scheme == "IW" && r.estimator == "unbiased"));

    let bad = write(dir.path(), "bad.cfg", "input = x.csv\nlevel = 0.9\n");
    let out = run(&["analyze", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("'level'"), "{}", stderr(&out));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let two = write(
        dir.path(),
        "two.csv",
        "household_id,individual_id,h,z,y\nA,1,1,1,5\nA,2,1,1,3\nB,1,0,0,1\nB,2,0,0,2\n",
    );
    let out = run(&["analyze", "--input", two.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("'A'"), "{}", stderr(&out));

    let single = write(
        dir.path(),
        "single.csv",
        "household_id,individual_id,h,z,y\nA,1,1,1,5\nA,2,1,0,3\nB,1,0,0,1\n",
    );
    let out = run(&["analyze", "--input", single.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("spillover"));

    let out = run(&["analyze", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["analyze", "--input", "/nonexistent/file.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn check_equal_sizes_all_pass() {
    let out = run(&["check", "--sizes", "2,2,2,2", "--treated", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn check_mixed_sizes_skips_equal_size_identities() {
    let out = run(&["check", "--sizes", "2,2,3,3", "--treated", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("PASS  simple-difference bias")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("SKIP  cluster regression equivalence")), "{text}");
}

#[test]
fn check_over_capacity_exits_two() {
    let out = run(&["check", "--sizes", "2,2,3,3", "--treated", "2", "--cap", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cap"), "{}", stderr(&out));
}

#[test]
fn simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("run{k}"));
        let out = run(&[
            "simulate",
            "iw-study",
            "--reps",
            "1",
            "--seed",
            "42",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push((out.stdout, fs::read(out_dir.join("iw_study.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].1.clone()).unwrap();
    assert!(csv.starts_with("condition,method,effect,coverage,mean_bias,abs_bias,mc_sd,reps,seed\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 2);
}

#[test]
fn coverage_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cov.cfg",
        "num_households = 20\nsigma_c = 0.1, 0.3\nsigma_y = 0.2\nreps = 5\nseed = 3\n",
    );
    let out_dir = dir.path().join("cov");
    let out = run(&[
        "simulate",
        "coverage",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["coverage_summary.csv", "coverage_cells.csv", "coverage_icc.csv"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }
    assert!(stdout(&out).contains("cluster-hc2"));

    let bad = write(dir.path(), "bad.cfg", "replications = 5\n");
    let out = run(&["simulate", "coverage", "--config", bad.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("'replications'"));
}
