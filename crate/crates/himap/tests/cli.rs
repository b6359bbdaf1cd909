use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use himap::config::ExperimentConfig;
use himap::dataset::{read_jsonl, write_jsonl};
use himap_core::model::ModelConfig;
use himap_core::task::{gen_dataset, SyntheticTaskSpec, TRAIN_SPLIT};

fn himap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_himap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = himap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference();
    cfg.model = ModelConfig {
        layers: 6,
        heads: 2,
        hidden: 16,
        ffn: 32,
        ..ModelConfig::reference()
    };
    cfg.train.steps = 10;
    cfg.train.batch = 2;
    cfg.train_examples = 20;
    cfg.eval_examples = 10;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("task.json"), serde_json::to_string(&SyntheticTaskSpec::default()).unwrap()).unwrap();
    fs::write(d.join("exp.json"), serde_json::to_string(&tiny_config(d)).unwrap()).unwrap();

    ok(&["gen-data", "--spec", s(&d.join("task.json")), "--count", "12", "--out", s(&d.join("data")), "--split", "eval"]);
    let data = d.join("data/eval.jsonl");
    assert_eq!(read_jsonl(&data).unwrap().len(), 12);

    ok(&["train", "--config", s(&d.join("exp.json")), "--out", s(&d.join("run"))]);
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 11);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 10);
    let ckpt = d.join("run/model.hmap");

    ok(&["saliency", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&d.join("sal"))]);
    let sal = fs::read_to_string(d.join("sal/saliency.csv")).unwrap();
    assert_eq!(sal.lines().next(), Some("layer,s_sys,s_img,s_ins,s_vv,s_vt,s_vt_recv"));
    assert_eq!(sal.lines().count(), 7);

    ok(&["perturb", "--ckpt", s(&ckpt), "--data", s(&data), "--kind", "vt,vv,random", "--windows", "first2,last2", "--out", s(&d.join("pert"))]);
    let cons = fs::read_to_string(d.join("pert/consistency.csv")).unwrap();
    assert_eq!(cons.lines().next(), Some("window_start,window_end,kind,c_label,c_score,e,n_examples"));
    assert_eq!(cons.lines().count(), 7);
    let bias = fs::read_to_string(d.join("pert/bias.csv")).unwrap();
    assert_eq!(bias.lines().next(), Some("window_start,window_end,e_vt,e_vv,d"));
    assert_eq!(bias.lines().count(), 3);

    ok(&["prune-eval", "--ckpt", s(&ckpt), "--data", s(&data), "--schedule", "toy-aggressive", "--out", s(&d.join("prune"))]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("prune/prune_eval.json")).unwrap()).unwrap();
    assert_eq!(report["image_counts"], serde_json::json!([36, 36, 18, 18, 5, 5]));
    let keep = fs::read_to_string(d.join("prune/keep_map.jsonl")).unwrap();
    assert_eq!(keep.lines().count(), 12);

    ok(&["prune-eval", "--ckpt", s(&ckpt), "--data", s(&data), "--schedule", "none", "--out", s(&d.join("none"))]);
    let none: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("none/prune_eval.json")).unwrap()).unwrap();
    assert_eq!(none["accuracy_pruned"], none["accuracy_unpruned"]);
    assert_eq!(none["cost"]["eta"], 0.0);

    let grid = ok(&["ablate", "--ckpt", s(&ckpt), "--data", s(&data), "--grid", "1,2:0,50"]);
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "filter_layer,filter_ratio,criterion,accuracy,drop_points,eta");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,0.0,phi_sh,"));
}

#[test]
fn cost_reports_table_one_numbers() {
    let out = ok(&["cost", "--arch", "llava-7b", "--n-image", "576", "--schedule", "aggressive"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["baseline_tflops"].as_f64().unwrap() - 2.98).abs() < 0.02);
    assert!((v["pruned_tflops"].as_f64().unwrap() - 0.73).abs() < 0.02);
    assert_eq!(v["schedule"], "2:50:phi_sh,8:75:phi_dp");
    assert_eq!(v["segments"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.hmap");
    let bad_cfg = dir.path().join("bad.json");
    let mut cfg = tiny_config(dir.path());
    cfg.model.heads = 5;
    fs::write(&bad_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["cost", "--arch", "llava-7b", "--n-image", "576", "--schedule", "aggressive", "--bogus"],
        vec!["frobnicate"],
        vec!["cost", "--arch", "gpt-9", "--n-image", "576", "--schedule", "aggressive"],
        vec!["cost", "--arch", "llava-7b", "--n-image", "576", "--schedule", "9:50,3:20"],
        vec!["saliency", "--ckpt", s(&missing), "--data", s(&missing), "--out", s(dir.path())],
        vec!["train", "--config", s(&bad_cfg), "--out", s(dir.path())],
    ];
    for args in cases {
        let out = himap(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(!err.trim().is_empty());
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = gen_dataset(&SyntheticTaskSpec::default(), 25, TRAIN_SPLIT).unwrap();
    write_jsonl(&path, &data).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), data);
    fs::write(&path, "{\"tokens\": [1]}\n").unwrap();
    assert!(read_jsonl(&path).is_err());
}

#[test]
fn reference_config_is_valid_and_round_trips() {
    let cfg = ExperimentConfig::reference();
    cfg.validate().unwrap();
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn shipped_configs_match_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = ExperimentConfig::load(&root.join("reference.json")).unwrap();
    assert_eq!(cfg, ExperimentConfig::reference());
    let task: SyntheticTaskSpec =
        serde_json::from_str(&fs::read_to_string(root.join("task.json")).unwrap()).unwrap();
    assert_eq!(task, SyntheticTaskSpec::default());
}
