use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddpo_core::World;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn ddpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let out = ddpo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "[paths]\noutput = \"out\"\n[train]\nsteps = 6\ngroup_size = 4\nseed = 3\n";

#[test]
fn train_writes_artifacts_with_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    run_ok(&["train", "--config", s(&cfg), "--mode", "ddpo"]);
    let out = dir.path().join("out");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for f in ["metrics.csv", "curves.csv", "params.txt"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config-hash: {hash}"), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2 + 6);
    assert_eq!(summary["config"]["train"]["mode"], "ddpo");
    assert!(summary["collapse"]["final_entropy"].is_number());
}

#[test]
fn missing_lexicon_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[paths]\noutput = \"out\"\nlexicon = \"nowhere.csv\"\n[train]\ngroup_size = 1\n",
    );
    let out = ddpo(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("paths.lexicon"), "{err}");
    assert!(err.contains("group_size"), "all problems listed: {err}");
}

#[test]
fn unreadable_config_is_io_error() {
    let out = ddpo(&["train", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_has_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[paths]\noutput = \"out\"\n[train]\nsteps = 3\nlearning_rate = 1e9\n",
    );
    let out = ddpo(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["metrics.csv", "curves.csv", "params.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_steps_keeps_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    run_ok(&["train", "--config", s(&cfg), "--steps", "0"]);
    let out = dir.path().join("out");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let text = std::fs::read_to_string(out.join("params.txt")).unwrap();
    let params = ddpo_core::PolicyParams::from_text(&text, &out.join("params.txt")).unwrap();
    assert_eq!(params, World::bundled().initial_params());
}

#[test]
fn eval_untrained_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let params = dir.path().join("init.txt");
    std::fs::write(&params, World::bundled().initial_params().to_text()).unwrap();
    run_ok(&["eval", "--config", s(&cfg), "--params", s(&params)]);
    let out = dir.path().join("out");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let scenarios = report["scenarios"].as_array().unwrap();
    assert_eq!(scenarios.len(), World::bundled().scenarios.len());
    for sc in scenarios {
        assert!(sc["violation_rate"].is_number());
        assert!(sc["diversity"]["div"].is_number());
        assert!(sc["mean_entropy"].as_f64().unwrap() > 0.0);
        assert!(sc["collapsed"].is_boolean());
        assert_eq!(sc["quality"], "skipped");
    }
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let row = csv.lines().nth(2).unwrap();
    assert!(row.ends_with("skipped,skipped,skipped,skipped"), "{row}");
    let samples = std::fs::read_to_string(out.join("samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), scenarios.len() * 8);
}

#[test]
fn eval_rejects_mismatched_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let text = World::bundled().initial_params().to_text();
    let params = dir.path().join("bad.txt");
    std::fs::write(&params, text.replacen("levels 4", "levels 3", 1)).unwrap();
    let out = ddpo(&["eval", "--config", s(&cfg), "--params", s(&params)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn close(a: &serde_json::Value, b: &serde_json::Value, path: &str) {
    match (a, b) {
        (serde_json::Value::Number(x), serde_json::Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9, "{path}: {x} vs {y}");
        }
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in y {
                close(&x[k], v, &format!("{path}.{k}"));
            }
        }
        (serde_json::Value::Array(x), serde_json::Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                close(u, v, &format!("{path}[{i}]"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

#[test]
fn trained_params_match_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        s(&fixture("toy.toml")),
        "--params",
        s(&fixture("ddpo_params.txt")),
        "--out",
        s(&out),
    ]);
    let got: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let golden: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("golden_eval.json")).unwrap()).unwrap();
    close(&got, &golden, "");
}

#[test]
fn constrained_eval_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let params = dir.path().join("init.txt");
    std::fs::write(&params, World::bundled().initial_params().to_text()).unwrap();
    run_ok(&["eval", "--config", s(&cfg), "--params", s(&params), "--constrained"]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/eval.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["constrained"], true);
    assert_eq!(report["overall"]["violation_rate"], 0.0);
}

#[test]
fn untrained_demo_is_repeatable_and_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = run_ok(&["demo", "--config", s(&cfg), "--steps", "0", "--out", s(&dir.path().join("a"))]);
    let b = run_ok(&["demo", "--config", s(&cfg), "--steps", "0", "--out", s(&dir.path().join("b"))]);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let scores: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split("inter-sample Rouge-L ").nth(1))
        .collect();
    assert_eq!(scores.len(), 2, "{text}");
    // no training: both blocks come from the same policy and seed
    assert_eq!(scores[0], scores[1]);
    let numbered = text.lines().filter(|l| l.trim_start().starts_with("8. ")).count();
    assert_eq!(numbered, 2);
    assert_eq!(
        std::fs::read(dir.path().join("a/demo.txt")).unwrap(),
        std::fs::read(dir.path().join("b/demo.txt")).unwrap()
    );
}

#[test]
fn corpus_stats_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(
        &corpus,
        concat!(
            r#"{"topic":"food","level":"L1","turns":[{"role":"user","text":"Hi."},{"role":"assistant","text":"I like rice."},{"role":"user","text":"Yes."},{"role":"assistant","text":"Good."}]}"#,
            "\n",
            r#"{"topic":"hobbies","level":"L1","turns":[{"role":"user","text":"Hello."},{"role":"assistant","text":"We analyze."}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = run_ok(&["corpus-stats", s(&corpus)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["dialogues"], 2);
    assert_eq!(v["turns"], 6);
    assert_eq!(v["topics"], 2);
    assert_eq!(v["words"], 9);
    assert_eq!(v["assistant_turns"], 3);
    let rate = v["violation_rate"].as_f64().unwrap();
    assert!((rate - 100.0 / 3.0).abs() < 1e-9, "{rate}");
}
