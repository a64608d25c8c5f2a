use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn maskdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MASKDIFF_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, count: usize, split: &str) -> PathBuf {
    let out = dir.join(split);
    let stdout = ok(maskdiff(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--bases",
        "6",
        "--size",
        "32",
        "--split",
        split,
    ]));
    let manifest = PathBuf::from(stdout.trim());
    assert!(manifest.is_file());
    manifest
}

/// Overrides for a model small and short enough for a test.
fn tiny(manifest: &Path, max_steps: u64) -> Vec<String> {
    [
        "model.image_size=32".to_string(),
        "train.batch_size=2".into(),
        "train.epochs=10".into(),
        format!("train.max_steps={max_steps}"),
        "train.jpeg_aug=false".into(),
        "train.mode=\"ciml\"".into(),
        "train.log_every=1".into(),
        "sampler.steps=2".into(),
        format!("data.train_manifest=\"{}\"", manifest.display()),
    ]
    .into_iter()
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

fn train(manifest: &Path, out: &Path, max_steps: u64, resume: Option<&Path>) -> PathBuf {
    let mut args = tiny(manifest, max_steps);
    args.extend(["train".into(), "--out".into(), out.display().to_string()]);
    if let Some(r) = resume {
        args.extend(["--resume".into(), r.display().to_string()]);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let ckpt = PathBuf::from(ok(maskdiff(&refs)).trim());
    assert!(ckpt.is_file(), "{}", ckpt.display());
    ckpt
}

fn log_steps(run: &Path) -> Vec<u64> {
    std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect()
}

#[test]
fn end_to_end_train_infer_eval() {
    let tmp = TempDir::new().unwrap();
    let train_manifest = synth(tmp.path(), 4, "train");
    let test_manifest = synth(tmp.path(), 3, "test");
    let run = tmp.path().join("run");
    let ckpt = train(&train_manifest, &run, 2, None);
    assert!(run.join("config.toml").is_file());
    assert_eq!(log_steps(&run), vec![0, 1]);

    let data = test_manifest.parent().unwrap();
    let forged = data.join("forged/000000.png");
    let original = data.join("original/000000.png");
    let out = tmp.path().join("pred");
    ok(maskdiff(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        forged.to_str().unwrap(),
        "--original",
        original.to_str().unwrap(),
        "--steps",
        "3",
        "--trajectory",
        "--uncertainty",
        "--out",
        out.to_str().unwrap(),
    ]));
    let mask = image::open(out.join("000000_mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    assert!(out.join("000000_uncertainty.png").is_file());
    let steps = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("_step"))
        .count();
    assert_eq!(steps, 3);

    // CIML checkpoint without an original is a usage error
    let bad = maskdiff(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        forged.to_str().unwrap(),
        "--mode",
        "ciml",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let vis = tmp.path().join("vis");
    ok(maskdiff(&[
        "visualize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        forged.to_str().unwrap(),
        "--original",
        original.to_str().unwrap(),
        "--out",
        vis.to_str().unwrap(),
    ]));
    assert!(vis.join("000000_overlay.png").is_file());

    let eval_args = |dir: &Path| {
        maskdiff(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            test_manifest.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ])
    };
    let (ea, eb) = (tmp.path().join("eval_a"), tmp.path().join("eval_b"));
    let table = ok(eval_args(&ea));
    assert!(table.contains("test"), "{table}");
    ok(eval_args(&eb));
    for f in ["report.txt", "records.jsonl", "summary.json"] {
        assert_eq!(std::fs::read(ea.join(f)).unwrap(), std::fs::read(eb.join(f)).unwrap(), "{f}");
    }
    let records = std::fs::read_to_string(ea.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3 * 3);
}

#[test]
fn resume_continues_the_step_counter() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(tmp.path(), 4, "train");
    let run = tmp.path().join("run");
    let first = train(&manifest, &run, 2, None);
    let kept = tmp.path().join("first.safetensors");
    std::fs::copy(&first, &kept).unwrap();
    train(&manifest, &run, 4, Some(&kept));
    assert_eq!(log_steps(&run), vec![0, 1, 2, 3]);
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nimage_size = 30\n").unwrap();
    let out = maskdiff(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(1));
    let out = maskdiff(&["--set", "model.image_size=30", "train"]);
    assert_eq!(out.status.code(), Some(1));
    let out = maskdiff(&["infer"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_manifest_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = tmp.path().join("manifest.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let mut args = tiny(&manifest, 1);
    args.extend(["train".into(), "--out".into(), tmp.path().join("run").display().to_string()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = maskdiff(&refs);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
