//! Command-line behaviour: config layering, exit codes and a full run of
//! every stage over the synthetic data with the mock backend.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use melkit::config::resolve;
use serde_json::{json, Value};

fn melkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_melkit"))
        .current_dir(dir)
        .args(args)
        .env_remove("MELKIT_CONFIG")
        .env_remove("MELKIT_LOG")
        .output()
        .expect("spawn melkit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn precedence_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("melkit.toml");
    std::fs::write(&file, "k = 6\n[llm]\nmodel_name = \"from-file\"\n").unwrap();
    for mask in 0..8u8 {
        let (use_file, use_env, use_flag) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let env = if use_env {
            vec![("MELKIT_K".to_string(), "7".to_string()), ("MELKIT_LLM__MODEL_NAME".to_string(), "from-env".to_string())]
        } else {
            Vec::new()
        };
        let flags = if use_flag { json!({"k": 8}) } else { json!({}) };
        let c = resolve(use_file.then_some(file.as_path()), env, &flags).unwrap();
        let want = if use_flag {
            8
        } else if use_env {
            7
        } else if use_file {
            6
        } else {
            5
        };
        assert_eq!(c.k, want, "file={use_file} env={use_env} flag={use_flag}");
        let want_model = match (use_env, use_file) {
            (true, _) => "from-env",
            (false, true) => "from-file",
            _ => c.llm.model_name.as_str(),
        };
        assert_eq!(c.llm.model_name, want_model);
    }
}

#[test]
fn invalid_settings_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[llm]\nendpoint = \"x\"\n").unwrap();
    std::fs::write(dir.path().join("small.toml"), "k = 50\ncoarse_n = 10\n").unwrap();
    for args in [
        vec!["retrieve", "--k", "0"],
        vec!["evaluate", "--k", "1,0"],
        vec!["--config", "bad.toml", "build-index"],
        vec!["--config", "small.toml", "build-index"],
        vec!["frobnicate"],
        vec!["--ablate", "everything", "evaluate"],
        vec!["ingest", "--ratios", "0.5,0.5,0.5"],
    ] {
        let o = melkit(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = Command::new(env!("CARGO_BIN_EXE_melkit"))
        .current_dir(dir.path())
        .args(["build-index"])
        .env("MELKIT_NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(melkit(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = melkit(dir.path(), &["--backend", "mock", "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

fn write_config(dir: &Path) -> PathBuf {
    let d = dir.display();
    let text = format!(
        "[paths]\n\
         entities = \"{d}/data/entities.jsonl\"\n\
         mentions = \"{d}/data/mentions.jsonl\"\n\
         splits = \"{d}/data/splits.json\"\n\
         index = \"{d}/data/entities.melx\"\n\
         cache_dir = \"{d}/cache\"\n\
         image_root = \"{d}\"\n\
         [llm]\nbackend = \"mock\"\nmock_selection = \"always-gold\"\n\
         [mllm]\nbackend = \"mock\"\n\
         [embedder]\nbackend = \"mock\"\n"
    );
    let path = dir.join("melkit.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_stage_runs_offline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // The demo writes the synthetic entities, mentions and images.
    assert_ok(&melkit(dir, &["demo", "--dir", dir.to_str().unwrap()]));
    let cfg = write_config(dir);
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        let o = melkit(dir, &full);
        assert_ok(&o);
        stdout(&o)
    };

    let out = run(&["ingest", "--ratios", "0.5,0.25,0.25"]);
    assert!(out.contains("50 entities, 20 mentions (train 10, val 5, test 5)"), "{out}");

    let out = run(&["augment-entities"]);
    assert!(out.contains("50 of 50 records augmented"), "{out}");
    assert!(out.contains("llm: 50 requests"), "{out}");
    let out = run(&["augment-mentions"]);
    assert!(out.contains("20 of 20 records augmented"), "{out}");
    assert!(out.contains("mllm: 7 requests"), "{out}");

    // Re-running performs no model calls.
    for cmd in ["augment-entities", "augment-mentions"] {
        let out = run(&[cmd, "--skip-existing"]);
        assert!(out.contains("0 of ") && !out.contains(" 1 requests"), "{out}");
        for line in out.lines().filter(|l| l.contains("requests")) {
            assert!(line.contains(": 0 requests"), "{cmd}: {line}");
        }
    }
    let out = run(&["augment-entities"]);
    assert!(out.contains("llm: 0 requests"), "cache should answer: {out}");

    let out = run(&["build-index"]);
    assert!(out.contains("50 rows of dim 256"), "{out}");

    let out = run(&["retrieve", "--k", "3", "--mention-id", "m04"]);
    let set: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(set["entries"].as_array().unwrap().len(), 3);

    let out = run(&["link", "--mention-id", "m04"]);
    let linked: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(linked["predicted"], "E031");

    let ft = dir.join("ft.jsonl");
    run(&["export-finetune", "--split", "all", "--output", ft.to_str().unwrap()]);
    let entities = std::fs::read_to_string(dir.join("data/entities.jsonl")).unwrap();
    let names: std::collections::HashMap<String, String> = entities
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .map(|e| (e["id"].as_str().unwrap().to_string(), e["name"].as_str().unwrap().to_string()))
        .collect();
    let records: Vec<Value> =
        std::fs::read_to_string(&ft).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    for r in &records {
        let out: Value = serde_json::from_str(r["output"].as_str().unwrap()).unwrap();
        let line = format!("{}. {}", out["id"].as_str().unwrap(), out["name"].as_str().unwrap());
        assert!(r["input"].as_str().unwrap().lines().any(|l| l.starts_with(&line)), "{line}");
        assert!(names.values().any(|n| n == out["name"].as_str().unwrap()));
    }

    let rep = dir.join("full.json");
    let out = run(&["evaluate", "--split", "all", "--report", rep.to_str().unwrap()]);
    assert!(out.contains("Top-1"), "{out}");
    let full = report(&rep);
    assert_eq!(full["topk"]["1"], 1.0);
    assert_eq!(full["ablation"], "none");

    let rep = dir.join("ablated.json");
    run(&["--ablate", "selection", "evaluate", "--split", "all", "--report", rep.to_str().unwrap()]);
    let ablated = report(&rep);
    assert_eq!(ablated["ablation"], "selection");
    assert_ne!(ablated["config_fingerprint"], full["config_fingerprint"]);

    // Test split only: 5 mentions.
    let rep = dir.join("test.json");
    run(&["evaluate", "--report", rep.to_str().unwrap()]);
    assert_eq!(report(&rep)["n_mentions"], 5);
}
