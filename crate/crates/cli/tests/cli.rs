// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use langfir::world::PlantedWorld;
use serde_json::Value;

fn langfir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langfir"))
        .current_dir(dir)
        .env("LANGFIR_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn synth_is_reproducible_and_loadable() {
    let d = tempfile::tempdir().unwrap();
    for id in ["a", "b"] {
        let o = langfir(d.path(), &["synth", "--seed", "5", "--run-id", id]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(d.path().join("runs/a/world.lftc")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("runs/b/world.lftc")).unwrap());
    let w = PlantedWorld::load(d.path().join("runs/a/world.lftc")).unwrap();
    assert_eq!(w.config().seed, 5);
    let summary = json(d.path().join("runs/a/world.json"));
    assert_eq!(summary["planted_specific"]["es"], serde_json::json!([4, 5]));
}

#[test]
fn oversized_dictionary_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"world": {"d_res": 16}}"#);
    let o = langfir(d.path(), &["--config", &cfg, "synth"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("exceeds d_res"));
    let bad = write(d.path(), "u.json", r#"{"seeed": 1}"#);
    assert_eq!(code(&langfir(d.path(), &["--config", &bad, "synth"])), 2);
    assert_eq!(code(&langfir(d.path(), &["--config", "missing.json", "synth"])), 2);
}

#[test]
fn identify_recovers_planted_features() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&langfir(d.path(), &["synth"])), 0);
    let world = "runs/run/world.lftc";
    let mut specs = Vec::new();
    for tau in ["0.8", "1"] {
        let id = format!("t{tau}");
        let o = langfir(d.path(), &["identify", "--world", world, "--tau", tau, "--run-id", &id]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let r = json(d.path().join(format!("runs/{id}/identify.json")));
        let s: Vec<Value> = r["features"].as_array().unwrap().iter().map(|f| f["s_spec"].clone()).collect();
        assert_eq!(s[2], serde_json::json!([4, 5]));
        assert!(r["flags"].as_array().unwrap().is_empty());
        specs.push(s);
    }
    assert_eq!(specs[0], specs[1]);

    let o = langfir(
        d.path(),
        &[
            "identify",
            "--sae",
            "runs/run/sae.lftc",
            "--acts",
            "runs/run/activations/fr.lftc",
            "--random",
            "runs/run/activations/random_fr.lftc",
            "--top-k",
            "2",
            "--run-id",
            "files",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(d.path().join("runs/files/identify.json"));
    assert_eq!(r["language"], "fr");
    assert_eq!(r["selected"], serde_json::json!([6, 7]));

    let o = langfir(d.path(), &["identify", "--world", "nope.lftc"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_feature_set_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"world": {"specific_magnitude": 1e-6}}"#);
    let o = langfir(d.path(), &["--config", &cfg, "identify"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("no language-specific features found"));
    let o = langfir(d.path(), &["--config", &cfg, "ablate"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn steering_scores_and_identities() {
    let d = tempfile::tempdir().unwrap();
    let o = langfir(d.path(), &["steer", "--layer-percentile", "0.4", "--target", "zh", "--run-id", "s"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(d.path().join("runs/s/steer.json"));
    let zh = &r["scores"]["langfir"]["zh"];
    assert!(zh["acc"].as_f64().unwrap() >= 0.9);
    let product = zh["acc"].as_f64().unwrap() * zh["bleu"].as_f64().unwrap();
    assert!((zh["acc_x_bleu"].as_f64().unwrap() - product).abs() < 1e-3);

    let o = langfir(d.path(), &["steer", "--alpha", "0", "--target", "zh", "--run-id", "z"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(d.path().join("runs/z/steer.json"));
    assert_eq!(r["scores"]["langfir"]["zh"]["acc"], 0.0);

    let o = langfir(
        d.path(),
        &["steer", "--vector", "runs/s/vectors/langfir_zh.lftc", "--target", "zh", "--run-id", "v"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(d.path().join("runs/v/steer.json"))["scores"]["langfir"]["zh"], *zh);

    let o = langfir(d.path(), &["steer", "--method", "nope"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablation_table_is_selective() {
    let d = tempfile::tempdir().unwrap();
    let o = langfir(d.path(), &["ablate", "--at", "0.9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.path().join("runs/run/ablation_ce.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("ablated,evaluated,layer,ce_base,ce_ablated,delta_ce"));
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let delta: f64 = f[5].parse().unwrap();
        if f[0] == f[1] {
            assert!(delta > 0.1, "{l}");
        } else {
            assert!(delta.abs() < 0.01, "{l}");
        }
    }
}

#[test]
fn single_point_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "c.json",
        r#"{"grid": {"layer_percentiles": [0.6], "alphas": [1.0], "taus": [1.0], "top_ks": [1]}}"#,
    );
    let o = langfir(d.path(), &["--config", &cfg, "sweep", "--method", "langfir"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(d.path().join("runs/run/sweep.json"));
    assert_eq!(r[0]["points"], 1);
    assert_eq!(r[0]["best"]["layer_percentile"], 0.6);
    let csv = std::fs::read_to_string(d.path().join("runs/run/sweep_langfir.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn ingest_reports_inventory() {
    let d = tempfile::tempdir().unwrap();
    let golden = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/golden.lftc");
    let o = langfir(d.path(), &["ingest", golden]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kind"], "tensors");
    assert_eq!(v["tensors"], serde_json::json!([{"name": "m", "dims": [3, 4]}]));
    assert_eq!(v["metadata"], serde_json::json!({"a": "1", "b": "x"}));

    let bytes = std::fs::read(golden).unwrap();
    std::fs::write(d.path().join("cut.lftc"), &bytes[..30]).unwrap();
    assert_eq!(code(&langfir(d.path(), &["ingest", "cut.lftc"])), 2);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(d.path().join("magic.lftc"), bad).unwrap();
    let o = langfir(d.path(), &["ingest", "magic.lftc"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_outputs_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "c.json",
        r#"{"grid": {"layer_percentiles": [0.5, 0.9], "alphas": [0.5, 1.0], "taus": [1.0], "top_ks": [1]}}"#,
    );
    let args = ["--config", &cfg, "eval", "--method", "langfir", "--method", "diffmean"];
    for (out, seq) in [("p", false), ("q", true)] {
        let mut a: Vec<&str> = args.to_vec();
        a.extend(["--out", out]);
        if seq {
            a.push("--sequential");
        }
        let o = langfir(d.path(), &a);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files = |root: &str| -> Vec<(String, Vec<u8>)> {
        let mut v = Vec::new();
        let base = d.path().join(root).join("run");
        let mut stack = vec![base.clone()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(&base).unwrap().display().to_string();
                    v.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    let (p, q) = (files("p"), files("q"));
    assert_eq!(p.len(), 10);
    for (a, b) in p.iter().zip(&q) {
        assert!(a == b, "{} differs", a.0);
    }
}
