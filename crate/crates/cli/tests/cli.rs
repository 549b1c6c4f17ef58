#[path = "../../core/tests/common/planted.rs"]
mod planted;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn flextab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flextab"))
        .args(args)
        .env_remove("FLEXTAB_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flextab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    dataset: String,
    fixture: String,
}

fn fixture(n: usize, separable: usize, seed: u64) -> (Fixture, planted::Planted) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let p = planted::planted(n, separable, seed);
    let (dataset, fixture) = p.write(&root.join("data"));
    (
        Fixture {
            _tmp: tmp,
            root,
            dataset: dataset.display().to_string(),
            fixture: fixture.display().to_string(),
        },
        p,
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_flow_on_mock_fixture() {
    let (fx, p) = fixture(60, 60, 9);
    let run = fx.root.join("run");
    let run_s = run.display().to_string();
    let mock = format!("mock_fixture={}", fx.fixture);

    let out = ok(&["ingest", "--dataset", &fx.dataset, "--run-dir", &run_s, "--set", &mock]);
    assert!(out.contains("ingested 60 instances"), "{out}");

    let out = ok(&["reason", "--pipeline", "vote", "--run-dir", &run_s, "--workers", "3"]);
    assert!(out.starts_with("vote: 60 instances, 300 backend requests"), "{out}");

    let out = ok(&["collect", "--run-dir", &run_s]);
    assert!(
        out.contains("collected 60 label sets (0 with no correct format)"),
        "{out}"
    );
    let labels = std::fs::read_to_string(run.join("labels.jsonl")).unwrap();
    for (line, row) in labels.lines().zip(&p.correct) {
        let v: Value = serde_json::from_str(line).unwrap();
        let want: Vec<u64> = row.iter().map(|&c| c as u64).collect();
        let got: Vec<u64> = v["labels"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| b.as_u64().unwrap())
            .collect();
        assert_eq!(got, want);
    }

    let out = ok(&["train", "--run-dir", &run_s, "--k", "1", "--epochs", "60"]);
    assert!(out.contains("trained on 60 of 60"), "{out}");
    assert!(run.join("model.bin").exists());

    let out = ok(&["predict", "--run-dir", &run_s]);
    let total: usize = out
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 60, "{out}");

    // Every format was already queried by the vote run.
    let out = ok(&["reason", "--pipeline", "single", "--run-dir", &run_s]);
    assert!(
        out.starts_with("single: 60 instances, 0 backend requests, accuracy 100.00%"),
        "{out}"
    );

    let out = ok(&["evaluate", "--run-dir", &run_s]);
    assert!(out.contains("oracle bound"), "{out}");
    assert!(out.contains("format classification        100.00%"), "{out}");
    let metrics = read_json(&run.join("metrics.json"));
    assert_eq!(metrics["oracle"].as_f64(), Some(1.0));
    assert!(metrics["pipelines"]["vote"].is_object());
    assert!(metrics["pipelines"]["single"].is_object());

    let out = ok(&["analyze", "--run-dir", &run_s]);
    assert!(out.contains("markdown"), "{out}");
    let report = read_json(&run.join("report.json"));
    assert!(report["chi_square"].is_null());
    assert!(run.join("report.txt").exists());
}

#[test]
fn fixed_and_self_consistency_labels() {
    let (fx, _) = fixture(10, 0, 4);
    let run_s = fx.root.join("run").display().to_string();
    let mock = format!("mock_fixture={}", fx.fixture);
    let out = ok(&[
        "reason",
        "--dataset",
        &fx.dataset,
        "--pipeline",
        "fixed",
        "--format",
        "database",
        "--run-dir",
        &run_s,
        "--set",
        &mock,
        "--set",
        "n_samples=3",
    ]);
    assert!(
        out.starts_with("fixed_database: 10 instances, 10 backend requests"),
        "{out}"
    );
    // Sampled outcomes are unscripted, so the mock synthesizes them.
    let out = ok(&[
        "reason",
        "--pipeline",
        "self_consistency",
        "--format",
        "markdown",
        "--run-dir",
        &run_s,
    ]);
    assert!(
        out.starts_with("self_consistency_markdown: 10 instances, 10 backend requests"),
        "{out}"
    );
    assert!(fx.root.join("run/outcomes/markdown.sampled.jsonl").exists());
}

#[test]
fn bad_usage_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let run_s = tmp.path().join("run").display().to_string();
    for args in [
        vec!["reason", "--pipeline", "nonsense", "--run-dir", &run_s],
        vec!["reason", "--pipeline", "fixed", "--run-dir", &run_s],
        vec!["train", "--k", "9", "--run-dir", &run_s],
        vec!["evaluate", "--set", "no_such_key=1", "--run-dir", &run_s],
        vec!["frobnicate"],
    ] {
        let out = flextab(&args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn missing_stage_is_named() {
    let (fx, _) = fixture(5, 0, 1);
    let run_s = fx.root.join("run").display().to_string();
    ok(&["ingest", "--dataset", &fx.dataset, "--run-dir", &run_s]);

    let out = flextab(&["collect", "--run-dir", &run_s]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("reason (pipeline vote or oracle)"), "{err}");

    let out = flextab(&["predict", "--run-dir", &run_s]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train"), "{err}");
}

#[test]
fn changed_outcome_settings_are_refused() {
    let (fx, _) = fixture(5, 0, 1);
    let run_s = fx.root.join("run").display().to_string();
    let mock = format!("mock_fixture={}", fx.fixture);
    ok(&[
        "reason",
        "--dataset",
        &fx.dataset,
        "--pipeline",
        "vote",
        "--run-dir",
        &run_s,
        "--set",
        &mock,
    ]);
    let out = flextab(&["reason", "--run-dir", &run_s, "--seed", "99"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed"), "{err}");
}

#[test]
fn config_file_and_flags_layer() {
    let (fx, _) = fixture(8, 0, 2);
    let run = fx.root.join("run");
    let cfg = fx.root.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# two formats only\ndataset = {}\nmock_fixture = {}\nformats = markdown, database\npipeline = vote\nrun_dir = {}\n",
            fx.dataset,
            fx.fixture,
            run.display()
        ),
    )
    .unwrap();
    let cfg_s = cfg.display().to_string();
    let out = ok(&["reason", "--config", &cfg_s]);
    assert!(out.starts_with("vote: 8 instances, 16 backend requests"), "{out}");
    let snapshot = std::fs::read_to_string(run.join("config.snapshot")).unwrap();
    assert!(
        snapshot.contains("formats = markdown,database") || snapshot.contains("formats = markdown, database"),
        "{snapshot}"
    );
    assert!(!run.join("outcomes/dict.jsonl").exists());
}

#[test]
fn analyze_across_two_models() {
    let mut dirs = Vec::new();
    let mut keep = Vec::new();
    for (name, seed) in [("model_a", 5), ("model_b", 6)] {
        let (fx, _) = fixture(40, 0, seed);
        let run = fx.root.join(name);
        let run_s = run.display().to_string();
        let mock = format!("mock_fixture={}", fx.fixture);
        ok(&[
            "reason",
            "--dataset",
            &fx.dataset,
            "--pipeline",
            "vote",
            "--run-dir",
            &run_s,
            "--set",
            &mock,
        ]);
        dirs.push(run_s);
        keep.push(fx);
    }
    let out_dir = keep[0].root.join("report");
    let out_s = out_dir.display().to_string();
    let out = ok(&[
        "analyze",
        "--run-dir",
        &dirs[0],
        "--run-dir",
        &dirs[1],
        "--out",
        &out_s,
        "--chi2-expectation",
        "contingency",
    ]);
    assert!(out.contains("model_a") || out.contains("chi"), "{out}");
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["chi_square"]["dof"].as_u64(), Some(4));
    assert_eq!(report["chi_square"]["expectation"].as_str(), Some("contingency"));
    assert_eq!(report["chi_square"]["models"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("report.txt").exists());

    // --run-dir twice is only meaningful for analyze.
    let out = flextab(&["evaluate", "--run-dir", &dirs[0], "--run-dir", &dirs[1]]);
    assert_eq!(out.status.code(), Some(2));
}
