use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use fedpart::data::{generate_synthetic, load_dataset, save_dataset, SyntheticKind, SyntheticParams};

fn fedpart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpart")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn toy_config(mode: &str, repeat: usize) -> Value {
    json!({
        "model": {"kind": "mlp", "input_shape": [4], "widths": [16, 16], "classes": 3},
        "data": {"synthetic": {"kind": "blobs", "n": 600, "classes": 3, "dim": 4, "separation": 3.0}},
        "clients": 8,
        "schedule": {"groups": 3, "rounds_per_layer": 1, "warmup_rounds": 0, "interleave_fnu_rounds": 0,
                     "cycles": 4, "order": "sequential", "mode": mode},
        "algo": {"algorithm": "fedavg", "local_iters": 20, "batch_size": 16,
                 "reset_optimizer_each_round": true, "hyper": {"lr": 0.01}},
        "seed": 7,
        "repeat": repeat,
        "track_theorem1": true,
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path) -> Output {
    let o = fedpart(&["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("partial", 1);
    cfg.as_object_mut().unwrap().remove("schedule");
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = fedpart(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["status"], "config_error");
    assert!(err["errors"].to_string().contains("schedule"), "{err}");
}

#[test]
fn invalid_values_are_all_reported_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config("partial", 1);
    cfg["clients"] = json!(0);
    cfg["schedule"]["groups"] = json!(7);
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = fedpart(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let errors = stderr_json(&o)["errors"].as_array().unwrap().len();
    assert!(errors >= 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn repeat_three_writes_three_logs_and_an_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "cfg.json", &toy_config("partial", 3));
    let out = dir.path().join("out");
    run(&path, &out);
    for seed in 7..10 {
        let log = out.join(format!("seed-{seed}/rounds.jsonl"));
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 12, "{}", log.display());
        assert!(out.join(format!("seed-{seed}/model.fprt")).is_file());
    }
    let agg: Value = serde_json::from_str(&std::fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], json!([7, 8, 9]));
    assert_eq!(agg["final_accuracy"]["values"].as_array().unwrap().len(), 3);
    assert!(agg["final_accuracy"]["std"].as_f64().unwrap() >= 0.0);
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical_at_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "cfg.json", &toy_config("partial", 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&path, &a);
    let o = fedpart(&["run", path.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success());
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let names = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ta), names(&tb));
    for ((pa, da), (_, db)) in ta.iter().zip(&tb) {
        if pa.ends_with("config.json") {
            continue;
        }
        assert!(da == db, "{} differs", pa.display());
    }
}

#[test]
fn analyzers_read_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "cfg.json", &toy_config("full", 1));
    let out = dir.path().join("run");
    run(&path, &out);
    let seed_dir = out.join("seed-7");

    let o = fedpart(&["analyze", "mismatch", "--steps", seed_dir.join("stepsizes.csv").to_str().unwrap()]);
    assert!(o.status.success());
    let report = stdout_json(&o);
    assert_eq!(report["ratios"].as_array().unwrap().len(), 11);
    assert!(report["mean"].as_f64().unwrap() > 1.0, "{report}");

    let o = fedpart(&["analyze", "theorem1", "--log", seed_dir.join("rounds.jsonl").to_str().unwrap()]);
    assert!(o.status.success());
    let t1 = stdout_json(&o);
    assert_eq!(t1["running_average"].as_array().unwrap().len(), 12);

    let checkpoint = seed_dir.join("model.fprt");
    let ana = dir.path().join("ana");
    let o = fedpart(&[
        "analyze",
        "k-estimate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        path.to_str().unwrap(),
        "--samples",
        "200",
        "--out",
        ana.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let k = stdout_json(&o);
    assert!(k["k_hat"].as_f64().unwrap() >= 1.0);
    assert_eq!(k["checkpoint_round"], 12);
    assert!(ana.join("k_estimate.json").is_file());

    let o = fedpart(&[
        "analyze",
        "k-estimate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        path.to_str().unwrap(),
        "--samples",
        "99",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["errors"].to_string().contains(">= 100"));
}

#[test]
fn theorem1_over_all_zero_masks_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "cfg.json", &toy_config("partial", 1));
    let out = dir.path().join("run");
    run(&path, &out);
    let text = std::fs::read_to_string(out.join("seed-7/rounds.jsonl")).unwrap();
    let zeroed: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v["groups"] = json!([]);
            v["masked_grad_norm_sq"] = Value::Null;
            v.to_string()
        })
        .collect();
    let log = dir.path().join("zero.jsonl");
    std::fs::write(&log, zeroed.join("\n")).unwrap();
    let o = fedpart(&["analyze", "theorem1", "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["final"], json!(0.0));
}

fn image_run(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = json!({
        "model": {"kind": "micro-resnet", "input_shape": [1, 8, 8], "widths": [4, 4, 8, 8, 16], "classes": 4},
        "data": {"synthetic": {"kind": "micro-images", "n": 200, "classes": 4, "noise": 0.1}},
        "clients": 4,
        "test_per_class": 10,
        "schedule": {"groups": 10, "rounds_per_layer": 1, "warmup_rounds": 1, "interleave_fnu_rounds": 0,
                     "cycles": 1, "order": "sequential"},
        "algo": {"algorithm": "fedavg", "local_iters": 2, "batch_size": 16},
        "seed": 3,
    });
    let path = write_config(dir, "img.json", &cfg);
    let out = dir.join("img");
    run(&path, &out);
    let samples = generate_synthetic(
        &SyntheticParams {
            kind: SyntheticKind::MicroImages,
            n: 20,
            classes: 4,
            noise: 0.1,
            ..Default::default()
        },
        99,
    )
    .unwrap();
    let sample_path = dir.join("samples.fpds");
    save_dataset(&samples, &sample_path).unwrap();
    (out.join("seed-3/model.fprt"), sample_path)
}

fn attack(checkpoint: &Path, samples: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "attack",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--sample",
        samples.to_str().unwrap(),
    ];
    args.extend(extra);
    fedpart(&args)
}

#[test]
fn attack_reports_baseline_rejects_unknown_groups_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (checkpoint, samples) = image_run(dir.path());

    let o = attack(&checkpoint, &samples, &["--iters", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o)["result"].clone();
    assert_eq!(r["psnr_db"], r["initial_psnr_db"]);

    let o = attack(&checkpoint, &samples, &["--groups", "#1,#11"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr_json(&o)["errors"].to_string();
    assert!(msg.contains("#11") && msg.contains("#10"), "{msg}");

    let out = dir.path().join("atk");
    let o = attack(
        &checkpoint,
        &samples,
        &["--iters", "20", "--index", "3", "--seed", "1", "--out", out.to_str().unwrap()],
    );
    assert!(o.status.success());
    let recon = load_dataset(out.join("reconstruction.fpds")).unwrap();
    assert_eq!(recon.len(), 1);
    assert_eq!(recon.sample_shape(), &[1, 8, 8]);
    assert_eq!(recon.labels(), &[load_dataset(&samples).unwrap().labels()[3]]);
    assert!(out.join("attack.json").is_file());
}

#[test]
fn full_gradient_attack_beats_the_deepest_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "model": {"kind": "mlp", "input_shape": [1, 8, 8], "widths": [16, 16], "classes": 4},
        "data": {"synthetic": {"kind": "micro-images", "n": 200, "classes": 4, "noise": 0.1}},
        "clients": 4,
        "test_per_class": 10,
        "schedule": {"groups": 3, "rounds_per_layer": 1, "warmup_rounds": 1, "interleave_fnu_rounds": 0,
                     "cycles": 1, "order": "sequential"},
        "algo": {"algorithm": "fedavg", "local_iters": 2, "batch_size": 16},
        "seed": 3,
    });
    let path = write_config(dir.path(), "mlp.json", &cfg);
    let out = dir.path().join("mlp");
    run(&path, &out);
    let (_, samples) = image_run(dir.path());
    let checkpoint = out.join("seed-3/model.fprt");
    let (mut full, mut deepest, mut baseline) = (0.0, 0.0, 0.0);
    for s in 0..10 {
        let (seed, index) = (s.to_string(), s.to_string());
        let result = |groups: &str| {
            let o = attack(&checkpoint, &samples, &["--groups", groups, "--seed", &seed, "--index", &index]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            stdout_json(&o)["result"].clone()
        };
        let r = result("all");
        full += r["psnr_db"].as_f64().unwrap() / 10.0;
        baseline += r["initial_psnr_db"].as_f64().unwrap() / 10.0;
        deepest += result("#3")["psnr_db"].as_f64().unwrap() / 10.0;
    }
    assert!(full > deepest, "all {full:.2} dB vs #3 {deepest:.2} dB");
    assert!(full - baseline >= 10.0, "all {full:.2} dB vs baseline {baseline:.2} dB");
}

#[test]
fn convert_round_trips_and_reports_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    std::fs::write(&csv, "a,b,label\n0.5,1,0\n2,3,2\n-1,0,1\n").unwrap();
    let fpds = dir.path().join("toy.fpds");
    let o = fedpart(&["convert", csv.to_str().unwrap(), fpds.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "n=3 K=3 dims=[2]");
    let ds = load_dataset(&fpds).unwrap();
    assert_eq!(ds.labels(), &[0, 2, 1]);
    assert_eq!(ds.features().data(), &[0.5, 1.0, 2.0, 3.0, -1.0, 0.0]);

    let bad = dir.path().join("nolabel.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    let o = fedpart(&["convert", bad.to_str().unwrap(), fpds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_json(&o)["errors"].to_string().contains("no label column"));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = fedpart(&["convert", empty.to_str().unwrap(), fpds.to_str().unwrap()]);
    assert!(!o.status.success());

    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "a,label\n1,0\n2\n").unwrap();
    let o = fedpart(&["convert", ragged.to_str().unwrap(), fpds.to_str().unwrap()]);
    assert!(stderr_json(&o)["errors"].to_string().contains("line 3"));
}
