//! Command-level contracts: byte-identical output under a fixed seed across
//! reruns and thread counts, and the documented exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_brw")
}

fn fixture(name: &str) -> String {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.push("tests/fixtures");
    p.push(name);
    p.into_os_string().into_string().unwrap()
}

fn tmp(name: &str) -> String {
    let mut p = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    p.push(name);
    p.into_os_string().into_string().unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn brw")
}

fn stdout_of(args: &[&str]) -> Vec<u8> {
    let out = run(args);
    assert!(
        out.status.success(),
        "brw {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

#[test]
fn commands_are_byte_identical_across_runs_and_thread_counts() {
    let traces = tmp("determinism_traces.ndjson");
    stdout_of(&[
        "--config",
        &fixture("simulate.toml"),
        "--out",
        &traces,
        "simulate",
        "--gens",
        "12",
        "--reps",
        "100",
    ]);

    let classify_cfg = fixture("classify.toml");
    let phase_g = fixture("phase_gaussian.toml");
    let phase_l = fixture("phase_lattice.toml");
    let simulate_cfg = fixture("simulate.toml");
    let spine_cfg = fixture("spine.toml");
    let tv_cfg = fixture("tv.toml");
    let similarity_cfg = fixture("similarity.toml");
    let diagnose_cfg = fixture("diagnose.toml");

    let cases: Vec<Vec<&str>> = vec![
        vec!["--config", &classify_cfg, "classify"],
        vec!["--config", &classify_cfg, "--format", "csv", "classify"],
        vec!["--config", &phase_g, "--format", "csv", "phase"],
        vec!["--config", &phase_g, "--format", "ndjson", "phase"],
        vec!["--config", &phase_l, "--format", "csv", "phase"],
        vec!["--config", &simulate_cfg, "simulate"],
        vec!["--config", &spine_cfg, "spine"],
        vec!["--config", &tv_cfg, "--seed", "3", "tv"],
        vec!["--config", &tv_cfg, "--seed", "3", "tv", "--check"],
        vec![
            "--config",
            &similarity_cfg,
            "similarity",
            "--from-complex",
        ],
        vec![
            "--config",
            &similarity_cfg,
            "similarity",
            "--from-complex",
            "--compare",
        ],
        vec!["--config", &diagnose_cfg, "diagnose", "--traces", &traces],
    ];

    for case in &cases {
        let first = stdout_of(case);
        let second = stdout_of(case);
        assert_eq!(first, second, "rerun differs for brw {case:?}");
        assert!(!first.is_empty(), "no output from brw {case:?}");

        let mut one = case.clone();
        one.splice(0..0, ["--threads", "1"]);
        let mut eight = case.clone();
        eight.splice(0..0, ["--threads", "8"]);
        let t1 = stdout_of(&one);
        let t8 = stdout_of(&eight);
        assert_eq!(t1, first, "--threads 1 differs for brw {case:?}");
        assert_eq!(t8, first, "--threads 8 differs for brw {case:?}");
    }
}

#[test]
fn invalid_configuration_exits_two() {
    let bad = tmp("bad_key.toml");
    std::fs::write(&bad, "seed = 1\nbogus = 2\n").unwrap();
    let out = run(&["--config", &bad, "classify", "--lambda", "0.3,0.4"]);
    assert_eq!(out.status.code(), Some(2), "unknown config key");

    let out = run(&["classify", "--lambda", "abc"]);
    assert_eq!(out.status.code(), Some(2), "malformed lambda");

    let out = run(&["phase", "--theta", "0,1", "--eta", "0,1", "--res", "1,1"]);
    assert_eq!(out.status.code(), Some(2), "degenerate raster resolution");

    let out = run(&["simulate", "--lambda", "0.3,0.4", "--format", "svg"]);
    assert_eq!(out.status.code(), Some(2), "unsupported format");
}

#[test]
fn strict_indeterminate_exits_three() {
    let table = format!("table:{}", fixture("table_binary.toml"));
    let base = [
        "--config",
        &fixture("classify_strict.toml"),
        "classify",
        "--model",
        &table,
    ];
    let out = run(&base);
    assert_eq!(out.status.code(), Some(0), "without --strict");
    let strict: Vec<&str> = ["--strict"].iter().chain(&base).copied().collect();
    let out = run(&strict);
    assert_eq!(out.status.code(), Some(3), "with --strict");
    assert!(String::from_utf8_lossy(&out.stdout).contains("Indeterminate"));
}

#[test]
fn runtime_failures_exit_one() {
    let out = run(&[
        "simulate",
        "--lambda",
        "1.0,0.1774100225154747",
        "--gens",
        "30",
        "--reps",
        "1",
        "--cap",
        "1000",
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "population cap: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
