use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gcnm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY_CONFIG: &str = r#"{
  "model": {"tau": 5, "horizon": 12, "d": 4, "blocks": 1, "L": 5, "S": 2,
            "n_h": 1, "n_d": 1, "n_w": 1, "steps_per_day": 8, "steps_per_week": 16, "head_hidden": 6},
  "train": {"max_epochs": 2, "batch_size": 16},
  "data": {"max_train_windows": 60}
}"#;

/// Raw CSVs, a prepared bundle and a 30% mix-range bundle.
fn toy(dir: &Path) -> (PathBuf, PathBuf) {
    let raw = dir.join("raw");
    ok(&["synthesize", "--nodes", "4", "--len", "300", "--steps-per-day", "8", "--out", s(&raw)]);
    let b0 = dir.join("b0");
    ok(&[
        "prepare",
        "--series",
        s(&raw.join("series.csv")),
        "--graph",
        s(&raw.join("graph.csv")),
        "--out",
        s(&b0),
    ]);
    let b1 = dir.join("b1");
    ok(&["inject", "--bundle", s(&b0), "--scenario", "mix", "--rate", "0.3", "--seed", "1", "--out", s(&b1)]);
    (b0, b1)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_is_idempotent_and_lists_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (b0, _) = toy(dir.path());
    let raw = dir.path().join("raw");
    let again = dir.path().join("again");
    ok(&[
        "prepare",
        "--series",
        s(&raw.join("series.csv")),
        "--graph",
        s(&raw.join("graph.csv")),
        "--out",
        s(&again),
    ]);
    let (m1, m2) = (json(&b0.join("manifest.json")), json(&again.join("manifest.json")));
    assert_eq!(m1, m2);
    assert_eq!(m1["split_ranges"], serde_json::json!([[0, 210], [210, 240], [240, 300]]));
    assert_eq!(m1["files"].as_object().unwrap().len(), 4);
}

#[test]
fn missing_graph_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "prepare",
        "--series",
        "whatever.csv",
        "--graph",
        "no_such_graph.csv",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("whatever.csv") || err.contains("no_such_graph.csv"), "{err}");
    let raw = dir.path().join("raw");
    ok(&["synthesize", "--nodes", "3", "--len", "50", "--out", s(&raw)]);
    let out = run(&[
        "prepare",
        "--series",
        s(&raw.join("series.csv")),
        "--graph",
        "no_such_graph.csv",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_graph.csv"));
}

#[test]
fn inject_validates_rate_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (b0, b1) = toy(dir.path());
    let out = run(&["inject", "--bundle", s(&b0), "--scenario", "mix", "--rate", "0", "--out", s(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["inject", "--bundle", s(&b0), "--scenario", "sideways", "--rate", "0.2", "--out", s(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
    let again = dir.path().join("b1_again");
    ok(&["inject", "--bundle", s(&b0), "--scenario", "mix", "--rate", "0.3", "--seed", "1", "--out", s(&again)]);
    assert_eq!(json(&b1.join("manifest.json")), json(&again.join("manifest.json")));
    assert_eq!(
        std::fs::read(b1.join("series.csv")).unwrap(),
        std::fs::read(again.join("series.csv")).unwrap()
    );
}

#[test]
fn train_resume_evaluate_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (_, b1) = toy(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TOY_CONFIG).unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--bundle", s(&b1), "--config", s(&cfg), "--out", s(&run_dir)]);
    let ck = run_dir.join("checkpoint.gcnm");
    assert_eq!(&std::fs::read(&ck).unwrap()[..5], b"GCNM1");
    let manifest = json(&run_dir.join("manifest.json"));
    assert!(manifest["outputs"]["checkpoint.gcnm"].is_string());

    // resume with a larger budget: epoch numbering continues
    std::fs::write(&cfg, TOY_CONFIG.replace("\"max_epochs\": 2", "\"max_epochs\": 3")).unwrap();
    let stdout = ok(&["train", "--bundle", s(&b1), "--config", s(&cfg), "--out", s(&run_dir)]);
    assert!(stdout.contains("resuming after epoch 2"), "{stdout}");
    let history = std::fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let epochs: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, vec!["1", "2", "3"]);

    let ev = dir.path().join("ev");
    ok(&["evaluate", "--checkpoint", s(&ck), "--bundle", s(&b1), "--out", s(&ev)]);
    let reports = json(&ev.join("metrics.json"));
    let rows = reports.as_array().unwrap();
    for row in rows {
        let keys: Vec<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
        let mut keys = keys.clone();
        keys.sort();
        assert_eq!(keys, ["horizon", "mae", "mape", "model", "n", "rate", "rmse", "scenario"]);
        assert_eq!(row["scenario"], "mix");
        if let (Some(mae), Some(rmse)) = (row["mae"].as_f64(), row["rmse"].as_f64()) {
            assert!(rmse >= mae && mae >= 0.0);
        }
    }
    for h in [1, 3, 6, 12] {
        assert!(rows.iter().any(|r| r["horizon"] == h), "horizon {h} missing");
    }
    assert!(rows.iter().any(|r| r["horizon"] == "avg"));
    let ev2 = dir.path().join("ev2");
    ok(&["evaluate", "--checkpoint", s(&ck), "--bundle", s(&b1), "--out", s(&ev2)]);
    assert_eq!(
        std::fs::read(ev.join("metrics.json")).unwrap(),
        std::fs::read(ev2.join("metrics.json")).unwrap()
    );

    // a second model under another label
    let gru_cfg = dir.path().join("gru.json");
    std::fs::write(
        &gru_cfg,
        TOY_CONFIG.replacen('{', r#"{"method": "gru", "gru_hidden": 6,"#, 1),
    )
    .unwrap();
    let gru_dir = dir.path().join("gru");
    ok(&["train", "--bundle", s(&b1), "--config", s(&gru_cfg), "--out", s(&gru_dir)]);
    let ev_gru = dir.path().join("ev_gru");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&gru_dir.join("checkpoint.gcnm")),
        "--bundle",
        s(&b1),
        "--out",
        s(&ev_gru),
    ]);
    let cmp = dir.path().join("cmp");
    ok(&["compare", "--reports", s(&ev), s(&ev_gru), "--out", s(&cmp)]);
    let result = json(&cmp.join("comparison.json"));
    assert_eq!(result["models"], serde_json::json!(["gcnm", "gru"]));
    let svg = std::fs::read_to_string(cmp.join("cd_diagram.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    // identical reports under two names form one clique
    let text = std::fs::read_to_string(ev.join("metrics.json")).unwrap();
    let twin = dir.path().join("twin.json");
    std::fs::write(&twin, text.replace("\"gcnm\"", "\"twin\"")).unwrap();
    let cmp2 = dir.path().join("cmp2");
    ok(&["compare", "--reports", s(&ev.join("metrics.json")), s(&twin), "--out", s(&cmp2)]);
    let result = json(&cmp2.join("comparison.json"));
    assert_eq!(result["cliques"], serde_json::json!([["gcnm", "twin"]]));

    // a single model cannot be compared
    let out = run(&["compare", "--reports", s(&ev), "--out", s(&dir.path().join("cmp3"))]);
    assert_eq!(out.status.code(), Some(2));

    // a different architecture in the same --out is refused
    std::fs::write(&cfg, TOY_CONFIG.replace("\"d\": 4", "\"d\": 5")).unwrap();
    let out = run(&["train", "--bundle", s(&b1), "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_key_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let (_, b1) = toy(dir.path());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rate": 0.01, "momentum": 0.9}}"#).unwrap();
    let out = run(&["train", "--bundle", s(&b1), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.momentum"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

/// Keys of every object in the schema match the serialized defaults.
#[test]
fn published_schema_matches_config_fields() {
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run_config.schema.json");
    let schema = json(&schema_path);
    let defaults = serde_json::to_value(gcnm::config::RunConfig::default()).unwrap();
    fn check(schema: &Value, value: &Value, at: &str) {
        let props = schema["properties"].as_object().unwrap();
        let obj = value.as_object().unwrap();
        let mut a: Vec<&String> = props.keys().collect();
        let mut b: Vec<&String> = obj.keys().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "fields of {at}");
        assert_eq!(schema["additionalProperties"], false, "{at}");
        for (k, v) in obj {
            if v.is_object() {
                check(&props[k], v, &format!("{at}.{k}"));
            } else if let Some(d) = props[k].get("default") {
                assert_eq!(d, v, "default of {at}.{k}");
            }
        }
    }
    check(&schema, &defaults, "config");
}
