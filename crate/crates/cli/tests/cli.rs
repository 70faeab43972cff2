use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn slamon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slamon")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn validate_accepts_shipped_scenario() {
    let out = slamon(&["validate", &scenario("virtual_coverage.toml")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("ok: 6 devices, 48 paths"));
}

#[test]
fn validate_reports_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let src = fs::read_to_string(scenario("two_groups.toml")).unwrap();
    fs::write(&bad, src.replace("local_max = 4", "local_max = 0")).unwrap();
    let out = slamon(&["validate", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("budget.local_max"), "{}", text(&out.stderr));

    fs::write(&bad, "rounds = 10\n[slo]\nthreshold = 1.0\nbogus = 2\n").unwrap();
    let out = slamon(&["validate", bad.to_str().unwrap()]);
    assert!(text(&out.stderr).contains("line 4"), "{}", text(&out.stderr));
}

#[test]
fn run_writes_outputs_and_report_reaggregates() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = slamon(&[
        "run",
        &scenario("virtual_coverage.toml"),
        "--strategy",
        "local,virtual",
        "--seeds",
        "0..3",
        "--jobs",
        "2",
        "--trace",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("local") && stdout.contains("virtual"), "{stdout}");

    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 6);
    assert_eq!(fs::read_dir(out_dir.join("traces")).unwrap().count(), 6);
    assert!(out_dir.join("summary.json").is_file());

    let agg = dir.path().join("again.csv");
    let out = slamon(&[
        "report",
        out_dir.join("results.csv").to_str().unwrap(),
        "--out",
        agg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(
        fs::read_to_string(agg).unwrap(),
        fs::read_to_string(out_dir.join("aggregate.csv")).unwrap()
    );

    let out = slamon(&["report", out_dir.join("results.csv").to_str().unwrap()]);
    assert_eq!(
        text(&out.stdout),
        fs::read_to_string(out_dir.join("aggregate.csv")).unwrap()
    );
}

#[test]
fn rejects_unknown_strategy() {
    let out = slamon(&["run", &scenario("hotspots.toml"), "--strategy", "greedy"]);
    assert!(!out.status.success());
}
