use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 4] = ["--set", "synth.train_count=24", "--set", "synth.test_count=12"];

fn mmfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfuse"))
        .args(args)
        .current_dir(dir)
        .env("MMFUSE_CACHE", dir.join("cache"))
        .output()
        .expect("spawn mmfuse")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mmfuse(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn prepare(dir: &Path, out: &str) {
    let mut args = vec!["prepare", "--synthetic", "--out", out];
    args.extend(SMALL);
    ok(dir, &args);
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn prepare_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path(), "a");
    prepare(t.path(), "b");
    let a = read_json(&t.path().join("a/run_manifest.json"));
    let b = read_json(&t.path().join("b/run_manifest.json"));
    assert!(a["outputs"].as_object().unwrap().contains_key("train/manifest.json"));
    assert_eq!(a["outputs"], b["outputs"]);
    assert_eq!(a["command"], "prepare");
}

#[test]
fn prepare_seed_changes_data() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path(), "a");
    let mut args = vec!["prepare", "--synthetic", "--out", "b", "--seed", "9"];
    args.extend(SMALL);
    ok(t.path(), &args);
    let a = read_json(&t.path().join("a/run_manifest.json"));
    let b = read_json(&t.path().join("b/run_manifest.json"));
    assert_ne!(a["outputs"], b["outputs"]);
    assert_eq!(b["seed"], 9);
}

#[test]
fn events_are_windowed() {
    let t = tempfile::tempdir().unwrap();
    // Timestamps 100..=349 with window 100 give frames [100,200), [200,300), [300,400).
    let mut csv = String::from("x,y,t,polarity\n");
    for t in 100..350 {
        csv += &format!("{},{},{t},{}\n", t % 8, (t / 8) % 8, t % 2);
    }
    fs::write(t.path().join("ev.csv"), csv).unwrap();
    ok(
        t.path(),
        &["prepare", "--events", "ev.csv", "--window", "100", "--sensor", "8x8", "--out", "ev"],
    );
    let m = read_json(&t.path().join("ev/manifest.json"));
    let text = m.to_string();
    assert!(text.contains("events-00002"));
    assert!(!text.contains("events-00003"));
    assert!(text.contains("event"));
}

#[test]
fn lidar_projects_to_a_depth_sample() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("pts.csv"), "0,0,5\n1,1,10\n-1,0,-2\n").unwrap();
    ok(
        t.path(),
        &["prepare", "--lidar", "pts.csv", "--intrinsics", "4,4,4,4", "--sensor", "8x8", "--out", "li"],
    );
    assert!(read_json(&t.path().join("li/manifest.json")).to_string().contains("lidar-00000"));
}

#[test]
fn missing_input_exits_2_and_names_it() {
    let t = tempfile::tempdir().unwrap();
    let o = mmfuse(t.path(), &["prepare", "--events", "absent.csv", "--window", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"));
    let o = mmfuse(t.path(), &["train", "--stage", "rgb-pretrain", "--data", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn bad_arguments_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(mmfuse(t.path(), &["train", "--stage", "bogus", "--data", "x"]).status.code(), Some(2));
    assert_eq!(mmfuse(t.path(), &["plot"]).status.code(), Some(2));
    let o = mmfuse(t.path(), &["prepare", "--synthetic", "--set", "synth.nope=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth.nope"));
}

#[test]
fn multimodal_without_init_exits_2() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path(), "data");
    let o = mmfuse(t.path(), &["train", "--stage", "multimodal", "--data", "data", "--iterations", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--init-from"));
    ok(
        t.path(),
        &["train", "--stage", "multimodal", "--data", "data", "--iterations", "2", "--from-scratch", "--out", "mm"],
    );
}

#[test]
fn cache_resolves_relative_data() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["prepare", "--synthetic", "--out", "cache/toy"];
    args.extend(SMALL);
    ok(t.path(), &args);
    ok(
        t.path(),
        &["train", "--stage", "rgb-pretrain", "--data", "toy", "--iterations", "2", "--out", "pre"],
    );
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    prepare(d, "data");
    ok(d, &["train", "--stage", "rgb-pretrain", "--data", "data", "--iterations", "4", "--out", "pre"]);
    ok(
        d,
        &[
            "train", "--stage", "multimodal", "--data", "data", "--iterations", "4", "--init-from",
            "pre/model.ckpt", "--dropout-p", "0.25", "--out", "mm",
        ],
    );
    for f in ["model.ckpt", "history.csv", "config.json", "run_manifest.json"] {
        assert!(d.join("mm").join(f).is_file(), "{f}");
    }
    let cfg = read_json(&d.join("mm/config.json"));
    assert_eq!(cfg["multimodal"]["dropout"]["p"], 0.25);
    let hist = fs::read_to_string(d.join("mm/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);

    // Resuming continues the iteration count and keeps the earlier history.
    ok(
        d,
        &["train", "--stage", "multimodal", "--data", "data", "--iterations", "6", "--resume", "mm/model.ckpt", "--out", "mm2"],
    );
    let hist2 = fs::read_to_string(d.join("mm2/history.csv")).unwrap();
    let iters: Vec<&str> = hist2.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "3", "4", "5", "6"]);
    assert!(hist2.starts_with(&hist));

    // Eval is deterministic and covers each supported scenario by default.
    ok(d, &["eval", "--checkpoint", "mm/model.ckpt", "--data", "data", "--out", "e1"]);
    ok(d, &["eval", "--checkpoint", "mm/model.ckpt", "--data", "data", "--out", "e2"]);
    for f in ["metrics_multimodal.json", "metrics_unimodal-rgb.json", "metrics_unimodal-ir.json", "detections_multimodal.json"] {
        let a = fs::read(d.join("e1").join(f)).unwrap();
        let b = fs::read(d.join("e2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let m = read_json(&d.join("e1/metrics_multimodal.json"));
    let ap = m["ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));

    ok(d, &["probe", "--checkpoint", "mm/model.ckpt", "--data", "data", "--out", "pr"]);
    let report = read_json(&d.join("pr/probe_report.json"));
    assert_eq!(report["combinations"].as_array().unwrap().len(), 3);
    let emb = fs::read_to_string(d.join("pr/embedding.csv")).unwrap();
    assert!(emb.starts_with("sample_id,combination_id,x,y"));

    ok(d, &["plot", "--history", "mm2/history.csv", "--embedding", "pr/embedding.csv", "--out", "pl"]);
    for f in ["loss.svg", "embedding.svg"] {
        assert!(fs::read_to_string(d.join("pl").join(f)).unwrap().contains("<svg"));
    }
}

#[test]
fn unsupported_scenario_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    prepare(d, "data");
    ok(d, &["train", "--stage", "rgb-pretrain", "--data", "data", "--iterations", "1", "--out", "pre"]);
    let o = mmfuse(d, &["eval", "--checkpoint", "pre/model.ckpt", "--data", "data", "--scenario", "unimodal:depth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depth"));
}

#[test]
fn plot_three_point_history() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join("h.csv"),
        "iteration,lr,total,qfl,ce,giou,l1,grad_norm\n1,0.1,3,1,1,0.5,0.5,1\n2,0.1,2,0.7,0.7,0.3,0.3,1\n3,0.1,1,0.4,0.3,0.2,0.1,1\n",
    )
    .unwrap();
    ok(t.path(), &["plot", "--history", "h.csv", "--out", "pl"]);
    assert!(t.path().join("pl/loss.svg").is_file());
    fs::write(t.path().join("empty.csv"), "iteration,lr,total,qfl,ce,giou,l1,grad_norm\n").unwrap();
    assert_eq!(mmfuse(t.path(), &["plot", "--history", "empty.csv"]).status.code(), Some(2));
}
