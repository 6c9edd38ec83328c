use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_outlierlab"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn corpus_train_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let runs = dir.path().join("run");
    run(&["corpus", "--out", path(&corpus), "--bytes", "40000", "--seed", "3"]);
    assert_eq!(std::fs::metadata(&corpus).unwrap().len(), 40000);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "model.n_layers = 1\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.d_ff = 32\nmodel.max_seq_len = 16\n\
             seq_len = 16\nbatch_size = 2\nschedule.warmup_steps = 2\nschedule.total_steps = 12\n\
             eval_interval = 6\neval_windows = 4\ncorpus_path = {}\noutput_dir = {}\n",
            path(&corpus),
            path(&runs)
        ),
    )
    .unwrap();
    let trained = run(&[
        "train",
        "--config",
        path(&cfg),
        "--set",
        "model.attention=softmax1",
        "--set",
        "optimizer.kind=orthoadam",
        "--set",
        "optimizer.backend=hadamard",
    ]);
    assert_eq!(trained["steps"], 12);
    assert_eq!(trained["summary"]["softmax_plus_one"], true);
    for f in [
        "checkpoint.bin",
        "metrics.csv",
        "timing.csv",
        "summary.json",
        "layers.csv",
    ] {
        assert!(runs.join(f).exists(), "{f}");
    }

    let ckpt = runs.join("checkpoint.bin");
    let eval = run(&["eval", "--ckpt", path(&ckpt), "--corpus", path(&corpus)]);
    assert!(eval["ppl"].as_f64().unwrap() > 1.0);

    let report = dir.path().join("report.json");
    run(&[
        "diagnose",
        "--ckpt",
        path(&ckpt),
        "--corpus",
        path(&corpus),
        "--out",
        path(&report),
        "--windows",
        "4",
    ]);
    assert!(report.exists() && report.with_extension("csv").exists());

    let q = run(&["quantize", "--ckpt", path(&ckpt), "--preset", "w4", "--windows", "4"]);
    assert!(q.to_string().contains("w4"), "{q}");
}

#[test]
fn theory_matches_closed_form() {
    let v = run(&["theory", "--dim", "64", "--alpha", "64", "--samples", "20000"]);
    let d = 64.0;
    let want = d - 4.0 + 12.0 / d - 6.0 / (d * d);
    assert!((v["kurtosis"]["theory"].as_f64().unwrap() - want).abs() < 1e-9);
    assert!(v["kurtosis"]["rel_err"].as_f64().unwrap() < 0.1);
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seq_len = 16\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_outlierlab"))
        .args(["train", "--config", path(&cfg), "--set", "model.bogus=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
