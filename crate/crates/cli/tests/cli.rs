use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_stsn");

fn corpus() -> Value {
    let people = ["Jack", "Maria", "Chen", "Omar", "Lena", "Priya"];
    let orgs = ["Acme", "Globex", "Initech"];
    let docs: Vec<Value> = (0..12)
        .map(|i| {
            let p = people[i % people.len()];
            let o = orgs[i % orgs.len()];
            if i % 2 == 0 {
                json!({
                    "tokens": [p, "works", "for", o, "Corp", "."],
                    "entities": [{"start": 0, "end": 1, "type": "PER"}, {"start": 3, "end": 5, "type": "ORG"}],
                    "relations": [{"head": 0, "tail": 1, "type": "WORK_FOR"}]
                })
            } else {
                json!({
                    "tokens": [o, "hired", p, "."],
                    "entities": [{"start": 0, "end": 1, "type": "ORG"}, {"start": 2, "end": 3, "type": "PER"}],
                    "relations": [{"head": 1, "tail": 0, "type": "WORK_FOR"}]
                })
            }
        })
        .collect();
    Value::Array(docs)
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        fs::write(p.join("data.json"), corpus().to_string()).unwrap();
        fs::write(p.join("schema.json"), r#"{"entities": ["ORG", "PER"], "relations": ["WORK_FOR"]}"#).unwrap();
        let config = format!(
            "dataset = \"{d}\"\nschema = \"{s}\"\noutput_dir = \"{o}\"\n{extra}\n\
             [train]\nepochs = 2\nbatch_size = 4\nlearning_rate = 1e-3\n\
             [model]\nlayers = 1\nheads = 2\ndim = 8\nmax_width = 3\nwidth_dim = 4\n\
             [embedder]\ndim = 8\n",
            d = p.join("data.json").display(),
            s = p.join("schema.json").display(),
            o = p.join("out").display(),
        );
        fs::write(p.join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_writes_checkpoint_log_and_metrics() {
    let ws = Workspace::new("");
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = ws.path("out");
    assert!(out.join("checkpoint.json").exists());
    assert!(!out.join(".lock").exists());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "L_L", "L_E", "L_R", "L_joint", "lr", "wall_time_s"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }
    for c in ["ner", "re", "re_plus"] {
        let m = read_json(&out.join(format!("metrics_{c}.json")));
        assert!(m["overall"]["f1"].as_f64().unwrap() >= 0.0);
        assert!(out.join(format!("metrics_{c}.txt")).exists());
    }
}

#[test]
fn predict_then_evaluate_from_file() {
    let ws = Workspace::new("");
    assert_eq!(code(&ws.run(&["train"])), 0);
    let ckpt = ws.path("out/checkpoint.json");
    let pred_dir = ws.path("pred");
    let o = ws.run(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--out", pred_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let preds = read_json(&pred_dir.join("predictions.json"));
    assert_eq!(preds.as_array().unwrap().len(), 12);

    let eval_dir = ws.path("eval");
    let o = ws.run(&[
        "evaluate",
        "--predictions",
        pred_dir.join("predictions.json").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--criterion",
        "re_plus",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(eval_dir.join("metrics_re_plus.json").exists());
    assert!(!eval_dir.join("metrics_ner.json").exists());
}

#[test]
fn empty_prediction_file_scores_zero_recall() {
    let ws = Workspace::new("");
    fs::write(ws.path("empty.json"), "[]").unwrap();
    let out = ws.path("eval");
    let o = ws.run(&["evaluate", "--predictions", ws.path("empty.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&out.join("metrics_ner.json"));
    assert_eq!(m["overall"]["r"].as_f64().unwrap(), 0.0);
    assert_eq!(m["overall"]["p"].as_f64().unwrap(), 0.0);
    assert_eq!(m["zero_division"], Value::Bool(true));
}

#[test]
fn unknown_keys_exit_with_two_and_list_every_key() {
    let ws = Workspace::new("colour = \"red\"\nflavour = 3");
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("colour") && err.contains("flavour"), "{err}");
    assert!(!ws.path("out").exists());
}

#[test]
fn alpha_outside_unit_interval_exits_with_two() {
    let ws = Workspace::new("");
    let text = fs::read_to_string(ws.path("run.toml")).unwrap().replace("width_dim = 4", "width_dim = 4\nalpha = 1.5");
    fs::write(ws.path("run.toml"), text).unwrap();
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn missing_dataset_file_is_a_runtime_error() {
    let ws = Workspace::new("");
    fs::remove_file(ws.path("data.json")).unwrap();
    assert_eq!(code(&ws.run(&["train"])), 1);
}

#[test]
fn k_fold_trains_one_model_per_fold() {
    let ws = Workspace::new("");
    let o = ws.run(&["train", "--folds", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&ws.path("out/cv_summary.json"));
    for row in summary.as_array().unwrap() {
        let folds = row["per_fold_f1"].as_array().unwrap();
        assert_eq!(folds.len(), 3);
        let mean = folds.iter().map(|f| f.as_f64().unwrap()).sum::<f64>() / 3.0;
        assert!((row["mean_f1"].as_f64().unwrap() - mean).abs() < 1e-12);
    }
    let mut test_docs = 0;
    for i in 0..3 {
        let preds = read_json(&ws.path(&format!("out/fold_{i}/predictions.json")));
        test_docs += preds.as_array().unwrap().len();
    }
    assert_eq!(test_docs, 12);
}

#[test]
fn ablate_reports_every_mode() {
    let ws = Workspace::new("ablate_no_label = true");
    let o = ws.run(&["ablate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_json(&ws.path("out/ablation.json"));
    let modes: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["full", "no_re_to_ner", "no_ner_to_re", "none", "no_label"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("no_ner_to_re"));
}

#[test]
fn analyze_buckets_by_length() {
    let ws = Workspace::new("");
    fs::write(ws.path("empty.json"), "").unwrap();
    let o = ws.run(&["analyze", "--predictions", ws.path("empty.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_json(&ws.path("out/analysis.json"));
    let ent = a["entity_length"]["ner_boundary_type"].as_object().unwrap();
    assert!(ent.contains_key("[1-2]"));
    assert!(a["text_length"]["re_plus"].as_object().unwrap().contains_key("[0-19]"));
}

#[test]
fn locked_output_directory_is_refused() {
    let ws = Workspace::new("");
    fs::create_dir_all(ws.path("out")).unwrap();
    fs::write(ws.path("out/.lock"), "1").unwrap();
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn gradcheck_passes_for_one_mode() {
    let ws = Workspace::new("");
    let o = ws.run(&["gradcheck", "--mode", "no_ner_to_re"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_json(&ws.path("out/gradcheck.json"));
    assert_eq!(reports.as_array().unwrap().len(), 1);
    assert_eq!(reports[0]["passed"], Value::Bool(true));
}

#[test]
fn tags_round_trip_through_conll() {
    let ws = Workspace::new("");
    let o = ws.run(&["tags"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let conll = ws.path("out/labels.conll");
    let text = fs::read_to_string(&conll).unwrap();
    assert!(text.contains("B-ORG") && text.contains("I-ORG"));
    let o = Command::new(BIN).args(["tags", "--decode"]).arg(&conll).output().unwrap();
    assert_eq!(code(&o), 0);
    let first: Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).lines().next().unwrap()).unwrap();
    let ents = first["entities"].as_array().unwrap();
    assert_eq!(ents.len(), 2);
    assert_eq!(ents[1]["start"], 3);
    assert_eq!(ents[1]["end"], 5);
}
