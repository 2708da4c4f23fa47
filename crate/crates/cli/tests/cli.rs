use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
version = 1
nu = 0.0

[synth]
n_requests = 3000
n_categories = 2
prediction_noise = 0.2
seed = 11

[grid.centers.default]
alpha = 1.0
gamma = 5.0
reserve_score = 0.005
price_floor = 0.01

[grid.half_widths]
alpha = 0.5
gamma = 5.0

[grid.steps]
alpha = 3
gamma = 3

[targets]
ctr_min = 0.0
cpc_max = 0.0

[[target_sweep]]
name = "loose"
cpc_max = 0.0

[[target_sweep]]
name = "impossible"
ctr_min = 0.5
"#;

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

fn mechopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechopt"))
        .arg("--config")
        .arg(dir.join("cfg.toml"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn apply_runs_every_stage_and_rerun_is_identical() {
    let dir = setup();
    let o = mechopt(dir.path(), &["apply"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("policy online"));
    let out = dir.path().join("out");
    for f in ["train.ndjson", "heldout.ndjson", "calibration.ndjson", "table.aopt", "policy.ndjson", "report.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    let before = std::fs::read(out.join("report.json")).unwrap();

    let again = mechopt(dir.path(), &["--force", "apply"]);
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), before);
}

#[test]
fn infeasible_solve_exits_2() {
    let dir = setup();
    std::fs::write(dir.path().join("t.toml"), "ctr_min = 0.5\n").unwrap();
    let t = dir.path().join("t.toml");
    let o = mechopt(dir.path(), &["solve", "--targets", t.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Infeasible"));
}

#[test]
fn bad_config_exits_1() {
    let dir = setup();
    std::fs::write(dir.path().join("cfg.toml"), "version = 1\nbogus = 1\n").unwrap();
    let o = mechopt(dir.path(), &["gen"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn sweeps_write_tables_and_mark_infeasible_rows() {
    let dir = setup();
    let o = mechopt(dir.path(), &["sweep-targets"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("infeasible (ctr_min)"), "{text}");
    let csv = std::fs::read_to_string(dir.path().join("out/sweep_targets.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = mechopt(dir.path(), &["sweep-nu", "--nu", "0,0.01"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("out/sweep_nu.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = mechopt(dir.path(), &["report"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("sweep_nu"));
}

#[test]
fn all_infeasible_sweep_exits_2() {
    let dir = setup();
    let f = dir.path().join("sets.toml");
    std::fs::write(&f, "[[target_sweep]]\nname = \"x\"\nctr_min = 0.5\n").unwrap();
    let o = mechopt(dir.path(), &["sweep-targets", "--targets", f.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn standalone_stages_chain_through_files() {
    let dir = setup();
    assert_eq!(code(&mechopt(dir.path(), &["gen"])), 0);
    let out = dir.path().join("out");
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let o = |name: &str| out.join(name).to_string_lossy().into_owned();

    let r = mechopt(dir.path(), &["calibrate", "--impressions", &o("impressions.ndjson"), "--bins", "10", "--out", &p("cal.ndjson")]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let r = mechopt(
        dir.path(),
        &["simulate", "--log", &o("train.ndjson"), "--calibration", &p("cal.ndjson"), "--out", &p("t.aopt")],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(dir.path().join("baseline.json").exists());

    let r = mechopt(
        dir.path(),
        &["solve", "--table", &p("t.aopt"), "--baseline", &p("baseline.json"), "--nu", "0.01", "--out", &p("policy.ndjson")],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let r = mechopt(
        dir.path(),
        &[
            "apply",
            "--policy",
            &p("policy.ndjson"),
            "--log",
            &o("heldout.ndjson"),
            "--calibration",
            &p("cal.ndjson"),
            "--truth",
            &o("truth.ndjson"),
            "--mode",
            "mc",
            "--reps",
            "3",
            "--out",
            &p("report.json"),
        ],
    );
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("report.json")).unwrap()).unwrap();
    assert!(report["policy"]["deltas"]["revenue"].is_number());
    assert_eq!(report["mode"]["mode"], "monte_carlo");
}

#[test]
fn missing_companion_path_is_an_error() {
    let dir = setup();
    let o = mechopt(dir.path(), &["apply", "--policy", "nowhere.ndjson"]);
    assert_eq!(code(&o), 1);
}
