use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn trackcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackcast")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = trackcast(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Exit code and parsed stderr error record.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = trackcast(args);
    let code = out.status.code().expect("exit code");
    let text = String::from_utf8_lossy(&out.stderr);
    let record = serde_json::from_str(text.lines().last().unwrap_or("")).expect("json error record");
    (code, record)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    let cfg = serde_json::json!({
        "net": {"depth": 1, "width": 16, "heads": 2, "feature_dim": 16, "t_cond": 4, "horizon": 32,
                "scale_v": 20.0, "scale_o": 0.1},
        "total_epochs": 2, "batch_size": 2, "warmup_epochs": 1, "seed": 1, "pad_tracks": null
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn gen_is_reproducible_and_atomic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen", "--out", s(&a), "--clips", "4", "--seed", "7"]);
    ok(&["gen", "--out", s(&b), "--clips", "4", "--seed", "7", "--threads", "1"]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let manifest = read_json(&a.join("run_manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["artifacts"]["clip_00003/raw/positions.f32"].is_string());
    assert!(!fs::read_to_string(a.join("run_manifest.json")).unwrap().contains(s(t.path())));

    let none = t.path().join("none");
    let (code, rec) = fails(&["gen", "--out", s(&none), "--clips", "0"]);
    assert_eq!(code, 2);
    assert_eq!(rec["error"], "config");
    assert_eq!(fs::read_dir(t.path()).unwrap().count(), 2, "no partial output");

    let before = tree_bytes(&a);
    let (code, _) = fails(&["gen", "--out", s(&a), "--clips", "1"]);
    assert_eq!(code, 3);
    assert_eq!(tree_bytes(&a), before);
}

#[test]
fn buckets_only_restricts_the_dataset() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("high");
    ok(&["gen", "--out", s(&out), "--clips", "6", "--seed", "2", "--buckets-only", "high"]);
    let ds = read_json(&out.join("dataset.json"));
    let clips = ds["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 6);
    assert!(clips.iter().all(|c| c["bucket"] == "high"));
    let (code, _) = fails(&["gen", "--out", s(&t.path().join("x")), "--buckets-only", "huge"]);
    assert_eq!(code, 2);
}

#[test]
fn config_files_reject_unknown_keys() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("gen.json");
    fs::write(&cfg, r#"{"clips": 2, "seed": 1, "colour": "red"}"#).unwrap();
    let (code, rec) = fails(&["gen", "--out", s(&t.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(rec["message"].as_str().unwrap().contains("colour"));
}

#[test]
fn pipeline_keeps_valid_clips_and_leaves_input_alone() {
    let t = tempfile::tempdir().unwrap();
    let gen = t.path().join("gen");
    let pipe = t.path().join("pipe");
    ok(&["gen", "--out", s(&gen), "--clips", "5", "--seed", "4"]);
    let before = tree_bytes(&gen);
    ok(&["pipeline", "--data", s(&gen), "--out", s(&pipe)]);
    assert_eq!(tree_bytes(&gen), before);
    let report = read_json(&pipe.join("pipeline_report.json"));
    assert_eq!(report["n_accepted"], 5);
    assert_eq!(report["discard_fraction"], 0.0);
    for c in report["clips"].as_array().unwrap() {
        assert!(c["mean_inlier_ratio"].as_f64().unwrap() > 0.5);
        assert!(pipe.join(c["clip"].as_str().unwrap()).join("meta.json").is_file());
    }

    let (code, rec) = fails(&["pipeline", "--data", s(&t.path().join("missing")), "--out", s(&t.path().join("p2"))]);
    assert_eq!(code, 3);
    assert_eq!(rec["command"], "pipeline");
}

#[test]
fn stats_writes_csv_and_svg() {
    let t = tempfile::tempdir().unwrap();
    let gen = t.path().join("gen");
    let out = t.path().join("stats");
    ok(&["gen", "--out", s(&gen), "--clips", "120", "--seed", "9"]);
    ok(&["stats", "--data", s(&gen), "--out", s(&out), "--bins", "20"]);
    let csv = fs::read_to_string(out.join("stats.csv")).unwrap();
    assert!(csv.starts_with("bin_center,count"));
    let counts: usize = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    let json = read_json(&out.join("stats.json"));
    assert_eq!(counts + json["n_excluded"].as_u64().unwrap() as usize, 120);
    assert!(fs::read_to_string(out.join("stats.svg")).unwrap().starts_with("<svg"));

    let few = t.path().join("few");
    ok(&["gen", "--out", s(&few), "--clips", "3", "--seed", "9"]);
    let (code, _) = fails(&["stats", "--data", s(&few), "--out", s(&t.path().join("s2"))]);
    assert_eq!(code, 3);
}

#[test]
fn train_sample_eval_chain() {
    let t = tempfile::tempdir().unwrap();
    let gen = t.path().join("gen");
    let held = t.path().join("held");
    let run = t.path().join("run");
    ok(&["gen", "--out", s(&gen), "--clips", "4", "--seed", "1"]);
    ok(&["gen", "--out", s(&held), "--clips", "3", "--seed", "50"]);
    let cfg = tiny_train_config(t.path());
    ok(&["train", "--config", s(&cfg), "--data", s(&gen), "--out", s(&run)]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,lr,loss,grad_norm\n"));
    assert_eq!(loss.lines().count(), 1 + 4);
    for f in ["last.ckpt", "best.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    // a second run into the same directory needs --resume
    let (code, _) = fails(&["train", "--config", s(&cfg), "--data", s(&gen), "--out", s(&run)]);
    assert_eq!(code, 3);
    let other = t.path().join("other.json");
    fs::write(&other, fs::read_to_string(&cfg).unwrap().replace("\"seed\":1", "\"seed\":2")).unwrap();
    let ck = run.join("last.ckpt");
    let (code, _) = fails(&["train", "--config", s(&other), "--data", s(&gen), "--out", s(&run), "--resume", s(&ck)]);
    assert_eq!(code, 2);

    let samp = t.path().join("samp");
    ok(&[
        "sample", "--checkpoint", s(&ck), "--data", s(&held), "--out", s(&samp), "--num-samples", "5", "--seed", "40",
        "--steps", "5", "--cond-displacement", "-0.1,0.2",
    ]);
    let clip0 = samp.join("clip_00000");
    let mut seeds = Vec::new();
    for k in 0..5 {
        let meta = read_json(&clip0.join(format!("sample_{k:02}")).join("meta.json"));
        assert_eq!(meta["t"], 32);
        assert_eq!(meta["provenance"]["displacement"], serde_json::json!([-0.1, 0.2]));
        seeds.push(meta["provenance"]["seed"].as_u64().unwrap());
    }
    assert_eq!(seeds, vec![40, 41, 42, 43, 44]);

    let ev = t.path().join("ev");
    ok(&[
        "eval", "--data", s(&held), "--out", s(&ev), "--checkpoint", s(&ck), "--steps", "5",
        "--methods", "no-motion,const-vel,oracle-vel,model-uncond,model-cond",
    ]);
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5 * 4 * 11);
    let mut keys: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), rows.len(), "one row per method, bucket and metric");

    let ev2 = t.path().join("ev2");
    ok(&["eval", "--data", s(&held), "--out", s(&ev2), "--methods", "model-cond", "--cond-samples", s(&samp)]);
    let report = read_json(&ev2.join("report.json"));
    assert_eq!(report["horizon"], Value::Null);
    let (code, _) = fails(&["eval", "--data", s(&held), "--out", s(&t.path().join("ev3")), "--methods", "model-uncond"]);
    assert_eq!(code, 2);
    let (code, _) = fails(&["sample", "--checkpoint", s(&ck), "--data", s(&held), "--out", s(&t.path().join("s2")), "--steps", "0"]);
    assert_eq!(code, 2);
}

#[test]
fn bad_numbers_map_to_their_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let gen = t.path().join("gen");
    ok(&["gen", "--out", s(&gen), "--clips", "2", "--seed", "3"]);
    let cfg = tiny_train_config(t.path());

    // a diverging optimizer is a numeric failure
    let wild = t.path().join("wild.json");
    fs::write(&wild, fs::read_to_string(&cfg).unwrap().replace("\"seed\":1", "\"seed\":1,\"lr\":1e300").replace("\"total_epochs\":2", "\"total_epochs\":8")).unwrap();
    let (code, rec) = fails(&["train", "--config", s(&wild), "--data", s(&gen), "--out", s(&t.path().join("run"))]);
    assert_eq!(code, 4, "{rec}");
    assert_eq!(rec["error"], "numeric");

    // a stored NaN is malformed input
    let pos = gen.join("clip_00001/clean/positions.f32");
    let mut bytes = fs::read(&pos).unwrap();
    bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&pos, bytes).unwrap();
    let (code, rec) = fails(&["train", "--config", s(&cfg), "--data", s(&gen), "--out", s(&t.path().join("run2"))]);
    assert_eq!(code, 3, "{rec}");
}
