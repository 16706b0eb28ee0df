use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "iterations = 3\nlr_drops = none\nbatch_size = 2\nchannels = 8\nhidden = 16\n";

fn dgdet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgdet")).current_dir(cwd).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = dgdet(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err_line(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    lines[0].to_string()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// Tiny source set and a tiny trained checkpoint under `root`.
fn setup(root: &Path) {
    fs::write(root.join("tiny.cfg"), TINY).unwrap();
    ok(root, &["synth", "--domain", "source_plain", "--n", "4", "--out", "data"]);
    ok(root, &["--config", "tiny.cfg", "train", "--data", "data/source_plain", "--out", "run"]);
}

#[test]
fn synth_train_evaluate_gap_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    setup(root);
    assert!(root.join("data/source_plain/annotations.json").exists());
    let log = fs::read_to_string(root.join("run/log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,lr,l_det,l_cal,l_ral,l_tot");
    assert_eq!(log.lines().count(), 4);
    assert!(root.join("run/checkpoint_final.bin").exists());

    ok(root, &["evaluate", "--checkpoint", "run/checkpoint_final.bin", "--data", "data/source_plain", "--out", "eval"]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("eval/eval.json")).unwrap()).unwrap();
    assert!(eval["map"].as_f64().unwrap() >= 0.0);
    let dets = fs::read_to_string(root.join("eval/detections.jsonl")).unwrap();
    for line in dets.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["image_id", "class_id", "score", "probs", "bbox"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        assert_eq!(v["probs"].as_array().unwrap().len(), 5);
        assert_eq!(v["bbox"].as_array().unwrap().len(), 4);
    }

    ok(root, &["gap-report", "--checkpoint", "run/checkpoint_final.bin", "--data", "data/source_plain", "--pool", "identity,contrast", "--out", "gap"]);
    let gap = fs::read_to_string(root.join("gap/gap_report.csv")).unwrap();
    assert_eq!(gap.lines().count(), 4);
    assert!(gap.lines().nth(2).unwrap().ends_with(",0.000000"));
}

#[test]
fn checkpoint_with_other_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    setup(root);
    fs::write(root.join("wide.cfg"), TINY.replace("channels = 8", "channels = 16")).unwrap();
    let out = dgdet(
        root,
        &["--config", "wide.cfg", "evaluate", "--checkpoint", "run/checkpoint_final.bin", "--data", "data/source_plain", "--out", "e"],
    );
    assert!(err_line(&out).starts_with("error: kind=CheckpointError msg="));
}

#[test]
fn corrupt_preview_counts_and_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["synth", "--domain", "source_plain", "--n", "1", "--out", "data"]);
    let img = files_in(&root.join("data/source_plain/images"))[0].clone();
    let img = img.to_str().unwrap();
    ok(root, &["corrupt", "--image", img, "--preview", "--out", "p"]);
    let files = files_in(&root.join("p"));
    assert_eq!(files.len(), 86);
    assert!(files.iter().all(|f| !f.to_string_lossy().contains("snow_s")));
    ok(root, &["corrupt", "--image", img, "--preview", "--out", "q"]);
    for f in &files {
        assert_eq!(fs::read(f).unwrap(), fs::read(root.join("q").join(f.file_name().unwrap())).unwrap());
    }
    ok(root, &["corrupt", "--image", img, "--preview", "--include-excluded", "--out", "all"]);
    assert!(files_in(&root.join("all")).len() > 86);
    ok(root, &["corrupt", "--image", img, "--name", "contrast", "--severity", "2", "--out", "one"]);
    assert_eq!(files_in(&root.join("one")).len(), 1);
}

#[test]
fn calibrate_fits_temperature() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["synth", "--domain", "source_plain", "--n", "2", "--out", "data"]);
    let ann: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("data/source_plain/annotations.json")).unwrap()).unwrap();
    // Overconfident detections: every ground-truth box at 0.95 plus as many
    // misses at 0.95.
    let mut lines = String::new();
    let images = ann["images"].as_array().unwrap();
    for a in ann["annotations"].as_array().unwrap() {
        let img = images.iter().find(|i| i["id"] == a["image_id"]).unwrap();
        let id = Path::new(img["file_name"].as_str().unwrap()).file_stem().unwrap().to_string_lossy().into_owned();
        let b: Vec<f64> = a["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let cat = a["category_id"].as_u64().unwrap();
        let cats: Vec<u64> = ann["categories"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
        let class = cats.iter().position(|&c| c == cat).unwrap() + 1;
        let mut probs = vec![0.0125; 5];
        probs[class] = 0.95;
        for (cls, bbox) in [(class, [b[0], b[1], b[0] + b[2], b[1] + b[3]]), (class, [0.0, 0.0, 1.5, 1.5])] {
            lines.push_str(&serde_json::json!({"image_id": id, "class_id": cls, "score": 0.95, "probs": probs, "bbox": bbox}).to_string());
            lines.push('\n');
        }
    }
    fs::write(root.join("dets.jsonl"), lines).unwrap();
    let stdout = ok(root, &["calibrate", "--detections", "dets.jsonl", "--data", "data/source_plain", "--apply", "dets.jsonl", "--out", "cal"]);
    assert!(stdout.starts_with("T = "));
    let t: f64 = fs::read_to_string(root.join("cal/temperature.txt")).unwrap().trim().parse().unwrap();
    assert!(t > 1.0, "overconfident scores need T > 1, got {t}");
    for f in ["reliability_before.csv", "reliability_after.png", "calibrated.jsonl", "dets_calibrated.jsonl"] {
        assert!(root.join("cal").join(f).exists(), "{f}");
    }
}

#[test]
fn experiment_writes_results_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    fs::write(root.join("tiny.cfg"), TINY).unwrap();
    let args = |out: &'static str| {
        vec![
            "--config", "tiny.cfg", "experiment", "--variants", "baseline,div_align", "--seeds", "0",
            "--train-size", "4", "--val-size", "2", "--no-gap", "--out", out,
        ]
    };
    ok(root, &args("a"));
    ok(root, &args("b"));
    let a = fs::read_to_string(root.join("a/results.csv")).unwrap();
    assert_eq!(a.lines().next().unwrap(), "variant,seed,domain,map,dece");
    assert_eq!(a.lines().count(), 1 + 2 * 4);
    assert_eq!(a, fs::read_to_string(root.join("b/results.csv")).unwrap());
    assert!(root.join("a/summary.md").exists());
    let mut top: Vec<String> = fs::read_dir(root).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, ["a", "b", "tiny.cfg"]);
}

#[test]
fn errors_are_one_machine_readable_line() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = dgdet(root, &["train", "--data", "missing", "--out", "o"]);
    assert!(err_line(&out).starts_with("error: kind=IOError msg="));
    let out = dgdet(root, &["synth", "--domain", "nowhere", "--out", "o"]);
    assert!(err_line(&out).starts_with("error: kind=ConfigError"));
    let out = dgdet(root, &["train", "--bogus"]);
    assert!(err_line(&out).starts_with("error: kind=UsageError"));
    fs::write(root.join("bad.cfg"), "alpha = -1\n").unwrap();
    let out = dgdet(root, &["--config", "bad.cfg", "train", "--data", "x", "--out", "o"]);
    assert!(err_line(&out).starts_with("error: kind=NegativeWeight"));
    let out = dgdet(root, &["corrupt", "--image", "none.png", "--name", "contrast", "--out", "o"]);
    assert!(err_line(&out).starts_with("error: kind=MissingImage"));
}
