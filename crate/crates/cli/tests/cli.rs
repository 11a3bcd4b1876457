use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geopo::policy::{CandidateAction, PolicyParams, FEATURE_DIM};
use geopo::reward::{score_tree_with_truth, RewardConfig};
use geopo::rollout::{RolloutTree, TreeDump};
use geopo::sim::PrimitiveAction;

fn geopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geopo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn geopo_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geopo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn gen(dir: &Path, name: &str, seed: u64, count: usize) -> PathBuf {
    let out = dir.join(name);
    let run = geopo(&[
        "gen-tasks",
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    out
}

#[test]
fn gen_tasks_is_deterministic_and_mixed() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", 0, 200);
    let b = gen(dir.path(), "b.jsonl", 0, 200);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.manifest.json")).unwrap(),
        fs::read(dir.path().join("b.manifest.json")).unwrap()
    );
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 200);
    for kind in ["EgoMovement", "Perspective", "Occlusion"] {
        assert!(text.contains(&format!("\"kind\":\"{kind}\"")), "no {kind} task");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(bundled("train.jsonl")).unwrap());
}

#[test]
fn empty_suite_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(dir.path(), "empty.jsonl", 3, 0);
    assert!(fs::read_to_string(out).unwrap().is_empty());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("empty.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&geopo(&["gen-tasks", "--count", "x", "--out", "a.jsonl"])), 2);
    assert_eq!(
        code(&geopo(&[
            "gen-tasks",
            "--count",
            "1",
            "--out",
            "a.jsonl",
            "--kind-mix",
            "ego"
        ])),
        2
    );
    assert_eq!(code(&geopo(&["frobnicate"])), 2);
    let missing = dir.path().join("no/such/dir/x.jsonl");
    assert_eq!(code(&geopo(&["gen-tasks", "--count", "1", "--out", path(&missing)])), 3);
    let missing_ckpt = dir.path().join("none.bin");
    let eval = geopo(&[
        "eval",
        "--checkpoint",
        path(&missing_ckpt),
        "--suite",
        path(&bundled("heldout.jsonl")),
    ]);
    assert_eq!(code(&eval), 3);
    assert_eq!(
        code(&geopo(&["train", "--preset", "table5-exp9", "--suite", "x.jsonl"])),
        2
    );
}

#[test]
fn check_grad_exit_codes() {
    let ok = geopo(&["check-grad", "--seed", "0"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("max_rel_err="));
    let json = geopo(&["check-grad", "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(code(&geopo(&["check-grad", "--inject-fault"])), 1);
}

fn worked_tree() -> RolloutTree {
    let mut t = RolloutTree::new(None);
    let imagine = |a| CandidateAction::Imagine(a);
    let x = t
        .push_node(None, imagine(PrimitiveAction::right(45.0)), 0.0, None)
        .unwrap();
    let a = t
        .push_node(Some(x), imagine(PrimitiveAction::left(30.0)), 0.0, None)
        .unwrap();
    let b = t
        .push_node(Some(x), imagine(PrimitiveAction::forward(1.0)), 0.0, None)
        .unwrap();
    t.push_node(Some(a), CandidateAction::Answer('A'), 0.0, None).unwrap();
    t.push_node(Some(a), CandidateAction::Answer('B'), 0.0, None).unwrap();
    t.push_node(Some(b), CandidateAction::Answer('B'), 0.0, None).unwrap();
    score_tree_with_truth(&mut t, 'A', 3, &RewardConfig::default()).unwrap();
    t
}

#[test]
fn inspect_tree_renders_step_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("worked.json");
    fs::write(
        &dump,
        serde_json::to_string(&TreeDump::new(&worked_tree(), None)).unwrap(),
    )
    .unwrap();
    let out = geopo(&["inspect-tree", "--dump", path(&dump)]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let line = |id: usize| {
        text.lines()
            .find(|l| l.trim_start().starts_with(&format!("[{id}]")))
            .unwrap()
            .to_string()
    };
    assert!(line(0).contains("r_s=0.25"));
    assert!(line(1).contains("r_s=0.5") && line(1).contains("lambda=0.9"));
    assert!(line(2).contains("r_s=0 "));
    assert!(text.contains("totals:"));

    let mut chain = RolloutTree::new(None);
    let f = chain
        .push_node(None, CandidateAction::Imagine(PrimitiveAction::forward(0.5)), 0.0, None)
        .unwrap();
    chain
        .push_node(Some(f), CandidateAction::Answer('C'), 0.0, None)
        .unwrap();
    fs::write(&dump, serde_json::to_string(&TreeDump::new(&chain, None)).unwrap()).unwrap();
    let out = stdout(&geopo(&["inspect-tree", "--dump", path(&dump)]));
    let nodes: Vec<&str> = out.lines().filter(|l| l.trim_start().starts_with('[')).collect();
    assert_eq!(nodes.len(), 2);
    assert!(nodes[1].starts_with("  [1]"));

    fs::write(&dump, "{\"roots\": [0], \"nodes\": {\"0\": ").unwrap();
    let bad = geopo(&["inspect-tree", "--dump", path(&dump)]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 1 column"), "{}", stderr(&bad));
    assert_eq!(
        code(&geopo(&[
            "inspect-tree",
            "--dump",
            path(&dir.path().join("missing.json"))
        ])),
        3
    );
}

fn train(dir: &Path, preset: &str, extra: &[&str]) -> Output {
    let suite = bundled("train.jsonl");
    let heldout = bundled("heldout.jsonl");
    let mut args = vec![
        "train",
        "--preset",
        preset,
        "--suite",
        path(&suite),
        "--heldout",
        path(&heldout),
        "--out",
        path(dir),
        "--steps",
        "4",
        "--seeds",
        "0,1",
    ];
    args.extend_from_slice(extra);
    geopo(&args)
}

#[test]
fn train_presets_write_comparable_outputs() {
    let root = tempfile::tempdir().unwrap();
    let (tree, chains, tree_again) = (root.path().join("t"), root.path().join("c"), root.path().join("t2"));
    for (dir, preset) in [
        (&tree, "table5-exp1"),
        (&chains, "table5-exp2"),
        (&tree_again, "table5-exp1"),
    ] {
        let out = train(dir, preset, &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for seed in [0, 1] {
        let name = format!("metrics_seed{seed}.csv");
        let (a, b) = (
            fs::read_to_string(tree.join(&name)).unwrap(),
            fs::read_to_string(chains.join(&name)).unwrap(),
        );
        assert_eq!(a.lines().next(), b.lines().next());
        assert_eq!(a.lines().count(), 5);
        assert!(b.lines().nth(1).unwrap().split(',').nth(1) == Some("grpo"));
        assert_eq!(a, fs::read_to_string(tree_again.join(&name)).unwrap());
        let ckpt = format!("params_seed{seed}.bin");
        assert_eq!(
            fs::read(tree.join(&ckpt)).unwrap(),
            fs::read(tree_again.join(&ckpt)).unwrap()
        );
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tree.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    assert!(summary["accuracy_mean"].as_f64().is_some());

    let eval = geopo(&[
        "eval",
        "--checkpoint",
        path(&tree.join("params_seed0.bin")),
        "--suite",
        path(&bundled("heldout.jsonl")),
    ]);
    assert_eq!(code(&eval), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(report["count"], 200);
    assert_eq!(report["accuracy"], summary["seeds"][0]["eval_accuracy"]);
}

#[test]
fn no_penalty_flag_matches_ablation_preset() {
    let root = tempfile::tempdir().unwrap();
    let (flag, preset) = (root.path().join("flag"), root.path().join("preset"));
    let a = train(&flag, "table5-exp1", &["--no-penalty"]);
    let b = train(&preset, "table5-exp3", &[]);
    assert_eq!((code(&a), code(&b)), (0, 0));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(summary["lambda"], 1.0);
    assert_eq!(
        fs::read(flag.join("metrics_seed1.csv")).unwrap(),
        fs::read(preset.join("metrics_seed1.csv")).unwrap()
    );
}

#[test]
fn non_finite_training_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("huge.bin");
    fs::write(
        &init,
        PolicyParams::from_weights(vec![1e308; FEATURE_DIM]).unwrap().to_bytes(),
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = train(&out_dir, "table5-exp1", &["--init", path(&init)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(out_dir.join("metrics_seed0.csv").exists());
    let dump = out_dir.join("abort_tree.json");
    assert_eq!(code(&geopo(&["inspect-tree", "--dump", path(&dump)])), 0);
}

#[test]
fn dump_tree_and_prefix_report() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("tree.json");
    let suite = bundled("train.jsonl");
    let args = [
        "dump-tree",
        "--suite",
        path(&suite),
        "--index",
        "5",
        "--out",
        path(&dump),
    ];
    assert_eq!(code(&geopo(&args)), 0);
    let first = fs::read(&dump).unwrap();
    assert_eq!(code(&geopo(&args)), 0);
    assert_eq!(first, fs::read(&dump).unwrap());
    let rendered = stdout(&geopo(&["inspect-tree", "--dump", path(&dump)]));
    assert!(rendered.contains("A="));

    let report = geopo(&["prefix-report", "--suite", path(&suite)]);
    assert_eq!(code(&report), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&report)).unwrap();
    assert!(report["savings"].as_f64().unwrap() >= 0.25);
    assert!(report["policy_evaluations"].as_u64() < report["trajectory_steps"].as_u64());
}

#[test]
fn example_config_matches_preset() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let (from_config, from_preset) = (dir.path().join("config"), dir.path().join("preset"));
    let config = root.join("configs/geopo.toml");
    let suite = bundled("train.jsonl");
    let heldout = bundled("heldout.jsonl");
    let common = ["--steps", "3", "--seeds", "2"];
    let mut a = vec!["train", "--config", path(&config), "--out", path(&from_config)];
    a.extend_from_slice(&common);
    let mut b = vec![
        "train",
        "--preset",
        "table5-exp1",
        "--out",
        path(&from_preset),
        "--suite",
        path(&suite),
    ];
    b.extend_from_slice(&["--heldout", path(&heldout)]);
    b.extend_from_slice(&common);
    let (ra, rb) = (geopo_in(&root, &a), geopo(&b));
    assert_eq!((code(&ra), code(&rb)), (0, 0), "{}", stderr(&ra));
    assert_eq!(
        fs::read(from_config.join("metrics_seed2.csv")).unwrap(),
        fs::read(from_preset.join("metrics_seed2.csv")).unwrap()
    );
}
