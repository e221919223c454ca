use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seeds = [0]
pretrain_corpus_size = 400
pretrain_epochs = 1
task_train = 40
task_val = 20
task_test = 20
tune_max_epochs = 3
condense_max_epochs = 2
sample_size = 4
bench_rates = [0.0, 0.5]
bench_batch_sizes = [2]
bench_token_counts = [8]
timing_min_sample_ms = 0.0
";

fn doe(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_doe"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "small.toml", "--seed", "3"])
        .args(args)
        .output()
        .unwrap();
    if out.status.code() == Some(2) {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();

    assert!(doe(d, &["--out", "m", "pretrain"]).status.success());
    assert!(d.join("m/model.bin").exists() && d.join("m/vocab.txt").exists());
    assert_eq!(header(&d.join("m/pretrain_log.csv")), "epoch,loss");

    assert!(doe(d, &["--out", "tasks", "gen-task", "--name", "ks"]).status.success());
    assert!(doe(d, &["--out", "tasks", "gen-task", "--kind", "topic-k"]).status.success());
    assert!(d.join("tasks/ks/train.csv").exists());

    assert!(doe(d, &["--out", "t", "train", "--model", "m", "--task", "tasks/ks"]).status.success());
    assert_eq!(header(&d.join("t/train_log.csv")), "epoch,train_loss,val_accuracy,elapsed_ms");

    let q = doe(d, &["--out", "q", "quantify", "--model", "m", "--task", "tasks/ks", "--prompt", "t/prompt.txt"]);
    assert!(q.status.success());
    assert!(d.join("q/relevance.txt").exists());

    let l = doe(
        d,
        &["--out", "l", "localize", "--model", "m", "--task", "tasks/ks", "--prompt", "t/prompt.txt", "--relevance", "q/relevance.txt"],
    );
    assert!(l.status.success());
    assert!(d.join("l/ks.expert").exists());
    assert_eq!(header(&d.join("l/search_trace.csv")), "probe,pruning_rate,accuracy,accepted,epochs,note");

    // Verify exits 0 or 1 depending on the expert; both are valid here.
    let v = doe(
        d,
        &[
            "--out", "v", "verify", "--model", "m", "--task", "tasks/ks", "--prompt", "t/prompt.txt", "--expert", "l/ks.expert",
            "--split", "val",
        ],
    );
    assert!(matches!(v.status.code(), Some(0 | 1)));
    let rows = std::fs::read_to_string(d.join("v/verify.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let passed = rows.lines().nth(1).unwrap().ends_with("true");
    assert_eq!(passed, v.status.code() == Some(0));

    assert!(doe(d, &["register", "--registry", "reg", "--model", "m", "--task", "tasks/ks", "--expert", "l/ks.expert"]).status.success());
    std::fs::write(d.join("req.txt"), "ks\tgood movie great\nks\tawful bad plot\n").unwrap();
    let r = doe(d, &["--out", "r", "run", "--registry", "reg", "--requests", "req.txt"]);
    assert!(r.status.success());
    assert_eq!(String::from_utf8(r.stdout).unwrap().lines().count(), 2);
    assert_eq!(std::fs::read_to_string(d.join("r/predictions.csv")).unwrap().lines().count(), 3);

    let b = doe(d, &["--out", "b", "bench", "--model", "m"]);
    assert!(b.status.success());
    assert_eq!(std::fs::read_to_string(d.join("b/speedup.csv")).unwrap().lines().count(), 3);
    assert_eq!(header(&d.join("b/speedup_plot.csv")), "series,x,metric,seed,value");
}

#[test]
fn preset_writes_reports_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let out = doe(d, &["--out", "p", "preset", "condensation-ablation"]);
    assert!(out.status.success());
    for f in ["condensation-ablation.csv", "condensation-ablation_summary.csv", "condensation-ablation_plot.csv"] {
        assert!(d.join("p").join(f).exists(), "{f} missing");
    }
    assert_eq!(header(&d.join("p/condensation-ablation_plot.csv")), "series,x,metric,seed,value");
}

#[test]
fn bad_input_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(doe(d, &["pretrain"]).status.code(), Some(2));
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    assert_eq!(doe(d, &["preset", "nope"]).status.code(), Some(2));
    assert_eq!(doe(d, &["train", "--model", "missing", "--task", "missing"]).status.code(), Some(2));
}
