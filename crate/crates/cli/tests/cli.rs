use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn codistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codistill"))
        .args(args)
        .env_remove("CODIST_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn datagen(dir: &Path, n: &str) {
    let o = codistill(&[
        "datagen",
        "--n",
        n,
        "--test-n",
        "12",
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TINY: &[&str] = &[
    "--pretrain-steps",
    "3",
    "--batch-size",
    "4",
    "--embed-dim",
    "8",
    "--heads",
    "2",
    "--ffn-dim",
    "16",
    "--checkpoint-every",
    "1",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let clean = data.join("clean.jsonl");
    let noisy = data.join("noisy.jsonl");
    let mut args = vec![
        "train",
        "--clean",
        clean.to_str().unwrap(),
        "--noisy",
        noisy.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    codistill(&args)
}

#[test]
fn help_lists_flags_with_defaults() {
    for cmd in ["datagen", "train", "eval", "caption"] {
        let o = codistill(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        assert!(stdout(&o).contains("default"), "{cmd}");
    }
    let o = codistill(&["datagen", "--help"]);
    assert!(stdout(&o).contains("--p-mismatch"));
    assert!(stdout(&o).contains("[default: 2000]"));
}

#[test]
fn datagen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    datagen(a.path(), "40");
    datagen(b.path(), "40");
    for f in ["clean.jsonl", "noisy.jsonl", "test.jsonl", "split.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let clean = fs::read_to_string(a.path().join("clean.jsonl")).unwrap();
    assert_eq!(clean.lines().count(), 40);
    assert!(clean.lines().all(|l| l.contains("\"noisy\":false")));
    assert_ne!(
        fs::read(a.path().join("clean.jsonl")).unwrap(),
        fs::read(a.path().join("test.jsonl")).unwrap()
    );
}

#[test]
fn datagen_bad_flags_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = codistill(&[
        "datagen",
        "--p-mismatch",
        "1.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--p-mismatch"), "{}", stderr(&o));
    let o = codistill(&["datagen", "--n", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn env_seed_sits_between_config_and_flags() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let d = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_codistill"));
        cmd.args([
            "datagen",
            "--n",
            "5",
            "--test-n",
            "1",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        cmd.env_remove("CODIST_SEED");
        if let Some(e) = env {
            cmd.env("CODIST_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(d.path().join("clean.jsonl")).unwrap()
    };
    let s3 = run(None, Some("3"));
    assert_eq!(run(Some("3"), None), s3);
    assert_eq!(run(Some("9"), Some("3")), s3);
    assert_ne!(run(None, None), s3);
}

#[test]
fn train_eval_caption_end_to_end() {
    let data = tempfile::tempdir().unwrap();
    datagen(data.path(), "24");
    let runs = tempfile::tempdir().unwrap();
    let out = runs.path().join("run");
    let o = train(data.path(), &out, &["--steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "manifest.json", "metrics.csv", "vocab.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(out.join("eval").is_dir());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("step,stream,loss,ce,kl,w_mean,w_min,w_max,wall_ms\n"));
    for k in 0..=2 {
        assert!(out.join(format!("checkpoints/student_{k}.ckpt")).is_file());
        assert!(out.join(format!("checkpoints/teacher_{k}.ckpt")).is_file());
    }

    let again = runs.path().join("again");
    assert!(train(data.path(), &again, &["--steps", "2"])
        .status
        .success());
    for f in [
        "metrics.csv",
        "vocab.txt",
        "checkpoints/student_2.ckpt",
        "checkpoints/teacher_2.ckpt",
    ] {
        assert!(
            fs::read(out.join(f)).unwrap() == fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    // Manifests differ only in the recorded run directory.
    let manifest = |dir: &Path| {
        let mut m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        m["config"]["paths"]["out"] = serde_json::Value::Null;
        m
    };
    assert_eq!(manifest(&out), manifest(&again));

    let test = data.path().join("test.jsonl");
    let o = codistill(&[
        "eval",
        "--run",
        out.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(
        line.starts_with("bleu4=") && line.contains(" auc=") && line.trim_end().ends_with("n=12"),
        "{line}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval/student_2.json")).unwrap())
            .unwrap();
    assert_eq!(report["n_samples"], 12);
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 12);

    let ckpt = out.join("checkpoints/student_2.ckpt");
    let vocab = out.join("vocab.txt");
    let caption = |count: &str, ckpt: &Path| {
        codistill(&[
            "caption",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--vocab",
            vocab.to_str().unwrap(),
            "--features",
            test.to_str().unwrap(),
            "--count",
            count,
        ])
    };
    let a = caption("3", &ckpt);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some("id\tground_truth\tcaption"));
    assert_eq!(stdout(&caption("3", &ckpt)), text);
    let z = caption("0", &ckpt);
    assert_eq!(z.status.code(), Some(0));
    assert_eq!(stdout(&z), "id\tground_truth\tcaption\n");

    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    let bad = runs.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let o = caption("3", &bad);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("checkpoint checksum mismatch"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn train_zero_steps_keeps_warm_start_only() {
    let data = tempfile::tempdir().unwrap();
    datagen(data.path(), "12");
    let out = data.path().join("run0");
    let o = train(data.path(), &out, &["--steps", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["student_0.ckpt", "teacher_0.ckpt"]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn train_missing_dataset_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&dir.path().join("nowhere"), &out, &["--steps", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/clean.jsonl"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn train_invalid_config_exits_2_before_side_effects() {
    let data = tempfile::tempdir().unwrap();
    datagen(data.path(), "6");
    let cfg = data.path().join("cfg.json");
    fs::write(&cfg, r#"{"model":{"embed_dim":10,"heads":4}}"#).unwrap();
    let out = data.path().join("run");
    let clean = data.path().join("clean.jsonl");
    let noisy = data.path().join("noisy.jsonl");
    let o = codistill(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--clean",
        clean.to_str().unwrap(),
        "--noisy",
        noisy.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn config_file_supplies_paths_and_flags_override_it() {
    let data = tempfile::tempdir().unwrap();
    datagen(data.path(), "10");
    let out = data.path().join("from_cfg");
    let cfg = data.path().join("cfg.json");
    let body = serde_json::json!({
        "train": {"steps": 1, "pretrain_steps": 2, "batch_size": 4, "seed": 5},
        "model": {"embed_dim": 8, "heads": 2, "ffn_dim": 8},
        "paths": {
            "clean": data.path().join("clean.jsonl"),
            "noisy": data.path().join("noisy.jsonl"),
            "out": out,
        }
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let o = codistill(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["steps"], 2);
    assert_eq!(resolved["train"]["seed"], 5);
    assert_eq!(resolved["model"]["embed_dim"], 8);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["final_step"], 2);
    assert_eq!(manifest["seed"], 5);
}
