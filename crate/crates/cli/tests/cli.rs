use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[synthetic]
n_tasks = 2
labels_per_task = 2
train_per_label = 12
test_per_label = 6
vocab_size = 100
seed = 1

[run]
batch_size = 8
replay_batch_size = 8
epochs = 2
lr = 0.001
replay_every = 2
memory_per_task = 8
clusters_per_label = 2
k = 5

[encoder]
hash_dim = 64
widths = 16, 8
";

fn sccl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sccl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.conf");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_then_sweep_then_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = sccl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed0/metrics.json").is_file());
    assert!(out.join("aggregate.json").is_file());

    let seed_dir = out.join("seed0");
    let o = sccl(&["sweep-k", seed_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(seed_dir.join("sweep_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let o = sccl(&["dump-embeddings", seed_dir.to_str().unwrap(), "--task", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(seed_dir.join("embeddings_task0.bin").is_file());
}

#[test]
fn seeds_and_mode_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = sccl(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "4,5",
        "--mode",
        "cl_only",
    ]);
    assert!(o.status.success());
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["mode"], "cl_only");
    assert_eq!(agg["accs"].as_array().unwrap().len(), 2);
    assert!(out.join("seed5/rmatrix.csv").is_file());
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let both = write_config(tmp.path(), "[data]\nmanifest = x.txt\n[synthetic]\n");
    let o = sccl(&["run", "--config", &both, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));

    let cfg = write_config(tmp.path(), SMALL);
    let o = sccl(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--mode",
        "fancy",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = sccl(&[
        "run",
        "--config",
        "/no/such/file.conf",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = sccl(&["bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_run_directory_is_an_error() {
    let o = sccl(&["sweep-k", "/no/such/run"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("lr = 0.001", "lr = 1e300"));
    let out = tmp.path().join("out");
    let o = sccl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("seed0/loss_log.csv").is_file());
}
