mod common;

use std::path::Path;
use std::process::{Command, Output};

fn hiertune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiertune"))
        .args(args)
        .output()
        .expect("spawn hiertune")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn hierarchy_validate_and_stats() {
    let demo = common::demo_hierarchy();
    let o = hiertune(&["hierarchy", "validate", p(&demo)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = hiertune(&["hierarchy", "stats", p(&demo)]);
    assert_eq!(stdout(&o).trim(), "40 / 21 / 8");

    let dir = tempfile::tempdir().unwrap();
    let ambiguous = dir.path().join("ambiguous.tsv");
    std::fs::write(&ambiguous, "l1\tl2\tl3\nrice\trice\tgrains\nrice\tnoodles\tgrains\n").unwrap();
    let o = hiertune(&["hierarchy", "validate", p(&ambiguous)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ambiguous.tsv:3"), "{}", stderr(&o));

    let cyclic = dir.path().join("cyclic.tsv");
    std::fs::write(&cyclic, "l1\tl2\tl3\na\tb\tc\nb\ta\tc\n").unwrap();
    assert_eq!(hiertune(&["hierarchy", "validate", p(&cyclic)]).status.code(), Some(1));

    let missing = dir.path().join("nope.tsv");
    assert_eq!(hiertune(&["hierarchy", "stats", p(&missing)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(hiertune(&[]).status.code(), Some(2));
    assert_eq!(hiertune(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hiertune(&["train", "--stage", "3", "--out", "x"]).status.code(), Some(2));
    assert_eq!(
        hiertune(&["synth", "--out", "x", "--set", "no-equals-sign"]).status.code(),
        Some(2)
    );
}

#[test]
fn invalid_lambda_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hiertune(&["synth", "--out", p(&out), "--set", "train.stage2.lambda=0.5,0.5,0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = hiertune(&[
        "synth",
        "--out",
        p(&out),
        "--set",
        "train.stage2.lambda=0.5,0.5,0.5",
        "--allow-unnormalized-lambda",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn stage2_without_stage1_checkpoints_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hiertune(&["train", "--stage", "2", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));
}

#[test]
fn exported_data_trains_and_evaluates_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let small = [
        "--set",
        "synthetic.train=40",
        "--set",
        "synthetic.val=10",
        "--set",
        "synthetic.test=10",
        "--set",
        "backbone.logit_scale=10",
    ];
    let mut args = vec!["synth", "--out", p(&data)];
    args.extend(small);
    let o = hiertune(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["hierarchy.tsv", "train.jsonl", "val.jsonl", "test.jsonl", "features.json", "config.ini"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let s1 = dir.path().join("s1");
    let cfg = data.join("config.ini");
    let o = hiertune(&[
        "train",
        "--stage",
        "1",
        "--config",
        p(&cfg),
        "--set",
        "train.stage1.epochs=2",
        "--seed",
        "3",
        "--out",
        p(&s1),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for lv in 1..=3 {
        assert!(s1.join(format!("level{lv}.json")).exists());
    }

    let s2 = dir.path().join("s2");
    let o = hiertune(&[
        "train",
        "--stage",
        "2",
        "--init",
        p(&s1),
        "--set",
        "train.stage2.epochs=1",
        "--out",
        p(&s2),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(s2.join("stage_comparison.json").exists());

    let ev = dir.path().join("eval");
    let o = hiertune(&["eval", "--checkpoints", p(&s2), "--split", "val", "--out", p(&ev)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("level,P,R,IOU,F1,#P,params\n"));
    assert_eq!(csv.lines().count(), 4);
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["config"]["train.seed"], "3");
    assert_eq!(results["config"]["train.stage2.epochs"], "1");
    assert!(results["inputs"]["hierarchy"].is_string());
    assert!(results["inputs"]["checkpoint_level1"].is_string());
    assert_eq!(results["levels"].as_array().unwrap().len(), 3);
    assert!(ev.join("per_class_f1.csv").exists());
    assert_eq!(
        std::fs::read_to_string(ev.join("predictions.jsonl")).unwrap().lines().count(),
        10
    );

    // checkpoints trained on 12 fine classes cannot score a 10-class hierarchy
    let o = hiertune(&[
        "eval",
        "--checkpoints",
        p(&s1),
        "--set",
        "data.hierarchy=",
        "--set",
        "synthetic.n_fine=10",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("digest mismatch"), "{}", stderr(&o));
}

const ANNOTATIONS: &str = r#"{"id":"a","image":null,"labels_l1":["crushed pepper","rice"]}
{"id":"b","image":null,"labels_l1":["shredded pork"]}
{"id":"c","image":null,"labels_l1":["black rice","drink"]}
"#;

#[test]
fn zeroshot_scores_mapped_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("test.jsonl");
    std::fs::write(&ann, ANNOTATIONS).unwrap();
    let preds = dir.path().join("llava.jsonl");
    std::fs::write(
        &preds,
        r#"{"id":"a","labels_l1":["Shredded Pepper","rice"]}
{"id":"b","labels_l1":["pulled pork","dragonfruit cube"]}
{"id":"c","labels_l1":["black rice","drink"]}
"#,
    )
    .unwrap();
    let aliases = dir.path().join("aliases.tsv");
    std::fs::write(&aliases, "# variant\tcanonical\npulled pork\tshredded pork\n").unwrap();
    let out = dir.path().join("zs");
    let demo = common::demo_hierarchy();
    let o = hiertune(&[
        "zeroshot",
        "--predictions",
        p(&preds),
        "--annotations",
        p(&ann),
        "--hierarchy",
        p(&demo),
        "--aliases",
        p(&aliases),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("unmatched labels: 1"));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["extra"]["unmatched_label_count"], 1);
    assert_eq!(results["extra"]["unmatched_labels"]["dragonfruit cube"], 1);
    let f1: Vec<f64> = results["levels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["f1"].as_f64().unwrap())
        .collect();
    assert!(f1[0] < 100.0);
    assert_eq!(f1[1], 100.0);
    assert_eq!(f1[2], 100.0);
    let per_class = std::fs::read_to_string(out.join("per_class_f1.csv")).unwrap();
    assert!(per_class.contains("2,pepper,100.00"), "{per_class}");

    std::fs::write(&preds, "{\"id\":\"zzz\",\"labels_l1\":[\"rice\"]}\n").unwrap();
    let o = hiertune(&[
        "zeroshot",
        "--predictions",
        p(&preds),
        "--annotations",
        p(&ann),
        "--hierarchy",
        p(&demo),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diff_reports_added_and_sibling_changes() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("test.jsonl");
    std::fs::write(&ann, ANNOTATIONS).unwrap();
    let rec = |id: &str, l1: &[&str], l2: &[&str], l3: &[&str]| {
        serde_json::json!({"id": id, "labels_l1": l1, "labels_l2": l2, "labels_l3": l3}).to_string()
    };
    let base = [
        rec("a", &["crushed pepper", "rice"], &["pepper", "rice"], &["vegetables", "grains and starches"]),
        rec("b", &["shredded pork"], &["pork"], &["meats"]),
        rec("c", &["black rice", "rice"], &["rice"], &["grains and starches"]),
    ]
    .join("\n");
    let new = [
        rec("a", &["crushed pepper", "rice"], &["pepper", "rice"], &["vegetables", "grains and starches"]),
        rec("b", &["shredded pork"], &["pork"], &["meats"]),
        rec("c", &["black rice", "drink"], &["rice", "drink"], &["grains and starches", "beverages"]),
    ]
    .join("\n");
    let (bp, np) = (dir.path().join("base.jsonl"), dir.path().join("new.jsonl"));
    std::fs::write(&bp, base + "\n").unwrap();
    std::fs::write(&np, new + "\n").unwrap();
    let out = dir.path().join("diff");
    let demo = common::demo_hierarchy();
    let o = hiertune(&[
        "diff",
        "--base",
        p(&bp),
        "--new",
        p(&np),
        "--annotations",
        p(&ann),
        "--hierarchy",
        p(&demo),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("c\n"), "{text}");
    assert!(text.contains("L1 + added correct: drink"));
    assert!(text.contains("L1 - removed incorrect: rice"));
    assert!(text.contains("kept \"black rice\", dropped sibling \"rice\""));
    assert!(out.join("diff.json").exists());
}
