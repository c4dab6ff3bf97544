mod common;

use common::{fixture, ok, run, s};

#[test]
fn simulate_writes_logs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "--seed", "4", "--episodes", "3", "--policy", "greedy", "--out", s(out)]);
    }
    for f in ["summary.json", "episode_000.jsonl", "episode_002.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"].as_array().unwrap().len(), 3);
    let log = std::fs::read_to_string(a.join("episode_001.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 200);
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["rank", "--model", s(&missing), "--data", s(&missing), "--report", s(&dir.path().join("r.json"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope"), "{err}");

    let out = run(&["synth-data", "--confusion", "1.5", "--out", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("confusion"));
}

#[test]
fn train_rejects_too_many_folds() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&f.data), "--folds", "9", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));
}

#[test]
fn binary_flag_drops_class_term() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    let base = empathic::model::TrainConfig { max_epochs: 2, ..Default::default() };
    std::fs::write(&cfg, serde_json::to_vec(&base).unwrap()).unwrap();
    ok(&["train", "--data", s(&f.data), "--config", s(&cfg), "--binary", "--out", s(dir.path())]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("train_report.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["weights"]["ce"], 0.0);
    assert!(v["config"]["weights"]["binary"].as_f64().unwrap() > 0.0);
}

#[test]
fn rank_reports_every_holdout_episode() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("rank.json");
    ok(&["rank", "--model", s(&f.model), "--data", s(&f.data), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let eps = v["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 3);
    for e in eps {
        let post = e["ranking"]["posterior"].as_array().unwrap();
        let total: f64 = post.iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    ok(&["rank", "--all", "--space", "behavior-mappings", "--model", s(&f.model), "--data", s(&f.data), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["episodes"].as_array().unwrap().len(), 9);
    assert_eq!(v["episodes"][0]["ranking"]["posterior"].as_array().unwrap().len(), 3);
}

#[test]
fn live_stream_shortfall_counts_starvation() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // 100 ticks worth of frames for a 200-tick episode
    let full = std::fs::read_to_string(f.data.join("subject_00/episode_0/features.csv")).unwrap();
    let short: String = full.lines().take(1 + 4500).map(|l| format!("{l}\n")).collect();
    let csv = dir.path().join("live.csv");
    std::fs::write(&csv, short).unwrap();
    let report = dir.path().join("live.json");
    ok(&["online", "--model", s(&f.model), "--live", s(&csv), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["frames_supplied"], 4500);
    assert!(v["starved_frames"].as_u64().unwrap() >= 4500);
    // pickups after the feed ran dry get no update
    assert!(!v["skipped_updates"].as_array().unwrap().is_empty());
}

#[test]
fn online_batch_report_and_metrics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (report, metrics) = (dir.path().join("o.json"), dir.path().join("m.csv"));
    ok(&["online", "--model", s(&f.model), "--seeds", "2", "--baseline-episodes", "4", "--report", s(&report), "--metrics", s(&metrics)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["random_baseline"]["episodes"], 4);
    let rows = std::fs::read_to_string(&metrics).unwrap();
    // header plus 200 ticks and a flush row per seed
    assert_eq!(rows.lines().count(), 1 + 2 * 201);
}

#[test]
fn eval_robotic_table_has_eight_rows() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (report, csv) = (dir.path().join("t.json"), dir.path().join("t.csv"));
    ok(&["eval-robotic", "--model", s(&f.model), "--subjects", "2", "--report", s(&report), "--csv", s(&csv)]);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 9);
}
