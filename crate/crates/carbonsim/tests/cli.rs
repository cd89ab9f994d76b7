//! End-to-end checks of the command-line surface: exit codes, artifacts,
//! environment overrides, and the comparison CSV round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use carbonsim::report::ComparisonTable;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_carbonsim"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn run_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_writes_report_and_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args([
            "run",
            "--scenario",
            fixture("mnist_mlp_10regions.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--dump-decisions",
        ])
        .output()
        .unwrap();
    run_ok(&out);
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("ledger.csv").exists());
    assert!(out_dir.join("decisions.json").exists());

    let ledger = std::fs::read_to_string(out_dir.join("ledger.csv")).unwrap();
    let mut lines = ledger.lines();
    assert_eq!(
        lines.next().unwrap(),
        "server,stage,slot,kwh,gco2e",
        "ledger header is part of the output contract"
    );
    assert!(lines.next().is_some(), "ledger has at least one row");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["scenario_id"], "mnist-mlp-10regions");
    assert_eq!(report["audit"]["passed"], true);
}

#[test]
fn run_with_non_baseline_policy_reports_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args([
            "run",
            "--scenario",
            fixture("reference_fleet.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    run_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("reduction vs Baseline"),
        "paired baseline line missing from:\n{stdout}"
    );
    assert!(out_dir.join("comparison.csv").exists());
    let table = ComparisonTable::read_csv(std::fs::File::open(out_dir.join("comparison.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2, "Baseline plus the scenario policy");
    assert!(table.reduction(10, carbonsim::Policy::Deta).unwrap() > 0.0);
}

#[test]
fn malformed_scenario_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ this is not json").unwrap();
    let out = bin()
        .args(["run", "--scenario", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty(), "parse failure must be explained");
}

#[test]
fn invalid_scenario_lists_violations_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Structurally valid JSON that fails validation: negative static power.
    let mut scenario: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fixture("linear_scaling.json")).unwrap(),
    )
    .unwrap();
    scenario["servers"][0]["static_power_w"] = serde_json::json!(-5.0);
    let bad = tmp.path().join("invalid.json");
    std::fs::write(&bad, serde_json::to_string(&scenario).unwrap()).unwrap();
    let out = bin()
        .args(["run", "--scenario", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("static_power_w"),
        "violation path missing from:\n{stderr}"
    );
}

#[test]
fn unknown_policy_exits_2() {
    let out = bin()
        .args([
            "run",
            "--scenario",
            fixture("linear_scaling.json").to_str().unwrap(),
            "--policy",
            "GREEDY",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_overrides_scenario_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut placements = Vec::new();
    for (sub, seed) in [("a", "1"), ("b", "2")] {
        let out_dir = tmp.path().join(sub);
        let out = bin()
            .args([
                "run",
                "--scenario",
                fixture("mnist_mlp_10regions.json").to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .env("CARBONSIM_SEED", seed)
            .output()
            .unwrap();
        run_ok(&out);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["seed"].as_u64(), seed.parse::<u64>().ok());
        placements.push(report["placements"].clone());
    }
    assert_ne!(
        placements[0], placements[1],
        "different seeds should draw different placements"
    );
}

#[test]
fn compare_emits_csv_and_requires_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("cmp");
    let out = bin()
        .args([
            "compare",
            "--scenario",
            fixture("reference_fleet.json").to_str().unwrap(),
            "--servers",
            "4,8",
            "--jobs",
            "2",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    run_ok(&out);
    let table = ComparisonTable::read_csv(std::fs::File::open(out_dir.join("comparison.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 8, "two counts x four policies");
    for row in &table.rows {
        if row.policy == carbonsim::Policy::Baseline {
            assert_eq!(row.reduction_pct, 0.0);
        }
    }

    // Leaving Baseline out of the policy list is a configuration error:
    // there is nothing to compute reductions against.
    let out = bin()
        .args([
            "compare",
            "--scenario",
            fixture("reference_fleet.json").to_str().unwrap(),
            "--servers",
            "4",
            "--policies",
            "DET,DETA",
            "--out",
            tmp.path().join("cmp2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_server_fleet_has_nothing_to_trade() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("cmp");
    let out = bin()
        .args([
            "compare",
            "--scenario",
            fixture("reference_fleet.json").to_str().unwrap(),
            "--servers",
            "1",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    run_ok(&out);
    let table = ComparisonTable::read_csv(std::fs::File::open(out_dir.join("comparison.csv")).unwrap()).unwrap();
    for row in &table.rows {
        assert!(
            row.reduction_pct.abs() < 1e-9,
            "policy {} claims {}% reduction with a single server",
            row.policy,
            row.reduction_pct
        );
    }
}

#[test]
fn verify_gap_threshold_controls_exit_code() {
    // The measured gap is small but nonzero (the first states round-trip
    // exactly, a nonzero gap shows up within the first thirty), so an
    // absurdly tight threshold must trip the dedicated exit code.
    let out = bin()
        .args([
            "verify",
            "--random-states",
            "30",
            "--grid-step",
            "0.02",
            "--max-gap",
            "1e-12",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let out = bin()
        .args(["verify", "--random-states", "30", "--grid-step", "0.02"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative gap"), "summary line:\n{stdout}");
}

#[test]
fn calibrate_writes_params_json() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("params.json");
    let out = bin()
        .args([
            "calibrate",
            "--table",
            fixture("training_measurements.csv").to_str().unwrap(),
            "--model",
            "CNN",
            "--out",
            params.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    run_ok(&out);
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&params).unwrap()).unwrap();
    assert_eq!(fit["model_kind"], "CNN");
    assert!(fit["max_abs_relative_error"].as_f64().unwrap() <= 0.15);

    // Unknown model names are configuration errors.
    let out = bin()
        .args([
            "calibrate",
            "--table",
            fixture("training_measurements.csv").to_str().unwrap(),
            "--model",
            "TRANSFORMER",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
