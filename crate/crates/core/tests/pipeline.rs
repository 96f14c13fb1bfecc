mod common;

use std::fs;
use std::path::Path;

use sccl::config::{CliConfig, DataSource};
use sccl::data::{gen_synthetic_tasks, load_jsonl, load_manifest, IdSpace, SyntheticSpec};
use sccl::encoder::{EncoderState, HashingConfig};
use sccl::rundir::{
    cmd_ablate, cmd_dump_embeddings, cmd_run, cmd_sweep_k, load_run, read_embeddings, CmdError,
    RunDir,
};
use sccl::trainer::{run_sequence, Mode, NoObserver, RunConfig, RunState};
use sccl::Error;

fn small_run() -> RunConfig {
    RunConfig {
        batch_size: 8,
        replay_batch_size: 8,
        epochs: 2,
        base_lr: 1e-3,
        replay_every: 3,
        memory_per_task: 10,
        clusters_per_label: 2,
        k: 5,
        hashing: HashingConfig {
            dim: 128,
            ..HashingConfig::default()
        },
        widths: vec![24, 12],
        ..RunConfig::default()
    }
}

fn small_config(seeds: Vec<u64>) -> CliConfig {
    CliConfig {
        data: DataSource::Synthetic(SyntheticSpec::new(3, 2, 15, 8, 120, 4)),
        run: small_run(),
        seeds,
    }
}

fn write_lines(path: &Path, lines: &[&str]) {
    fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn jsonl_counts_and_disjoint_labels() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_lines(
        &a,
        &[
            r#"{"text": "good film", "label": "pos", "split": "train"}"#,
            r#"{"text": "bad film", "label": "neg", "split": "train"}"#,
            r#"{"text": "great", "label": "pos", "split": "train"}"#,
            r#"{"text": "awful", "label": "neg", "split": "train"}"#,
            r#"{"text": "fine", "label": "pos", "split": "test"}"#,
            r#"{"text": "poor", "label": "neg", "split": "test"}"#,
        ],
    );
    write_lines(
        &b,
        &[
            r#"{"text": "stocks", "label": "business", "split": "train"}"#,
            r#"{"text": "goal", "label": "sport", "split": "test"}"#,
        ],
    );
    let mut ids = IdSpace::new();
    let ta = load_jsonl(&a, 0, &mut ids).unwrap();
    let tb = load_jsonl(&b, 1, &mut ids).unwrap();
    assert_eq!((ta.labels.len(), ta.train.len(), ta.test.len()), (2, 4, 2));
    assert!(ta.labels.is_disjoint(&tb.labels));
    // sorted names: neg before pos
    assert_eq!(ta.label_names.values().collect::<Vec<_>>(), ["neg", "pos"]);

    let manifest = dir.path().join("order1.txt");
    fs::write(&manifest, "# order\na.jsonl\nb.jsonl\n").unwrap();
    let seq = load_manifest(&manifest).unwrap();
    assert_eq!(seq.order_name, "order1");
    assert_eq!(seq.tasks.len(), 2);
    seq.validate().unwrap();
}

#[test]
fn jsonl_missing_label_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    write_lines(
        &p,
        &[
            r#"{"text": "ok", "label": "x", "split": "train"}"#,
            r#"{"text": "no label", "split": "train"}"#,
        ],
    );
    match load_jsonl(&p, 0, &mut IdSpace::new()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "\n").unwrap();
    assert!(matches!(
        load_jsonl(&empty, 0, &mut IdSpace::new()),
        Err(Error::InvalidDataset(_))
    ));
}

#[test]
fn synthetic_counts_and_degenerate_task() {
    let seq = gen_synthetic_tasks(&SyntheticSpec::new(4, 2, 50, 20, 500, 7)).unwrap();
    assert_eq!(seq.tasks.len(), 4);
    for t in &seq.tasks {
        assert_eq!((t.labels.len(), t.train.len(), t.test.len()), (2, 100, 40));
    }
    let tiny = gen_synthetic_tasks(&SyntheticSpec::new(1, 1, 1, 1, 10, 0)).unwrap();
    assert_eq!(tiny.tasks[0].train.len(), 1);
    let (_, report) = run_sequence(&tiny, &small_run()).unwrap();
    assert_eq!(report.bwt, None);
    assert_eq!(report.steps.steps, vec![0]);
}

#[test]
fn ird_is_inert_on_the_first_task() {
    let seq = small_config(vec![0]).data.load().unwrap();
    let mut trajectories = Vec::new();
    for mode in [Mode::Sccl, Mode::ScclNoIrd] {
        let cfg = RunConfig {
            mode,
            ..small_run()
        };
        let mut st = RunState::new(&cfg, 3).unwrap();
        st.train_task(&seq.tasks[0], &cfg, &mut NoObserver).unwrap();
        trajectories.push((st.encoder.clone(), st.log.clone()));
    }
    assert_eq!(trajectories[0], trajectories[1]);
    assert!(trajectories[0].1.iter().all(|r| r.loss_ird.is_none()));
}

#[test]
fn finish_task_buffers_min_of_quota_and_split() {
    let seq = small_config(vec![0]).data.load().unwrap();
    let cfg = RunConfig {
        memory_per_task: 1000,
        ..small_run()
    };
    let mut st = RunState::new(&cfg, 3).unwrap();
    st.train_task(&seq.tasks[0], &cfg, &mut NoObserver).unwrap();
    assert!(st.prev_snapshot.is_none());
    st.finish_task(&seq, 0, &cfg).unwrap();
    assert_eq!(st.buffer.len(), seq.tasks[0].train.len());
    assert_eq!(st.rmatrix.filled(), 1);
    assert_eq!(st.prev_snapshot.as_ref().unwrap().state(), &st.encoder);
}

#[test]
fn run_directory_contents_and_reruns() {
    let out = tempfile::tempdir().unwrap();
    let cfg = small_config(vec![0, 1, 2, 3, 4]);
    let agg = cmd_run(&cfg, out.path()).unwrap();
    assert_eq!(agg.accs.len(), 5);
    assert_eq!(agg.seeds, vec![0, 1, 2, 3, 4]);
    assert!((agg.acc_mean - agg.accs.iter().sum::<f64>() / 5.0).abs() < 1e-15);
    assert!(out.path().join("aggregate.json").is_file());

    let dir = RunDir::new(out.path().join("seed2"));
    for f in [
        dir.config(),
        dir.loss_log(),
        dir.rmatrix(),
        dir.metrics(),
        dir.encoder(2),
    ] {
        assert!(f.is_file(), "{}", f.display());
    }
    let log = fs::read_to_string(dir.loss_log()).unwrap();
    assert!(log.starts_with("step,task,loss_cl,loss_ird,lr,replay\n"));
    assert!(log.lines().skip(1).any(|l| l.ends_with(",1")));

    // the archived config reproduces the seed exactly
    let archived = CliConfig::load(&dir.config()).unwrap();
    assert_eq!(archived.seeds, vec![2]);
    let again = tempfile::tempdir().unwrap();
    cmd_run(&archived, again.path()).unwrap();
    for f in ["metrics.json", "rmatrix.csv", "loss_log.csv"] {
        assert_eq!(
            fs::read(dir.root.join(f)).unwrap(),
            fs::read(again.path().join("seed2").join(f)).unwrap(),
            "{f}"
        );
    }

    let loaded = load_run(&dir).unwrap();
    let rerun = EncoderState::load(&dir.encoder(2)).unwrap();
    assert_eq!(loaded.encoder, rerun);
}

#[test]
fn sweep_k_and_embedding_dump() {
    let out = tempfile::tempdir().unwrap();
    cmd_run(&small_config(vec![0]), out.path()).unwrap();
    let dir = RunDir::new(out.path().join("seed0"));
    let stored = load_run(&dir).unwrap().report.acc;

    let rows = cmd_sweep_k(&dir, &sccl::rundir::DEFAULT_SWEEP_K).unwrap();
    assert_eq!(rows.len(), 5);
    let csv = fs::read_to_string(dir.sweep()).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let k5 = rows.iter().find(|r| r.k == 5).unwrap();
    assert_eq!(k5.acc, stored);
    assert!(rows.iter().find(|r| r.k == 50).unwrap().clamped);
    assert!(!rows.iter().find(|r| r.k == 1).unwrap().clamped);

    let n = cmd_dump_embeddings(&dir, 1).unwrap();
    let loaded = load_run(&dir).unwrap();
    let task = loaded.seq.task(1).unwrap();
    assert_eq!(n, task.test.len() + loaded.buffer.task(1).unwrap().len());
    let (r, c, values) = read_embeddings(&dir.embeddings(1)).unwrap();
    assert_eq!((r, c), (n, 12));
    for row in values.chunks(c) {
        let norm: f64 = row
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    let labels = fs::read_to_string(dir.embedding_labels(1)).unwrap();
    assert_eq!(labels.lines().count(), n + 1);

    let first = fs::read(dir.embeddings(1)).unwrap();
    cmd_dump_embeddings(&dir, 1).unwrap();
    assert_eq!(first, fs::read(dir.embeddings(1)).unwrap());

    assert!(matches!(
        cmd_dump_embeddings(&dir, 99),
        Err(CmdError::Setup(Error::NotFound(_)))
    ));
    let missing = RunDir::new(out.path().join("nope"));
    assert!(cmd_sweep_k(&missing, &[10]).is_err());
}

#[test]
fn divergence_aborts_with_partial_log() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small_config(vec![0]);
    cfg.run.base_lr = 1e300;
    match cmd_run(&cfg, out.path()) {
        Err(CmdError::Runtime(Error::NonFinite(msg))) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    let log = fs::read_to_string(RunDir::new(out.path().join("seed0")).loss_log()).unwrap();
    assert!(log.lines().count() >= 2, "{log}");
    assert!(!out.path().join("seed0/metrics.json").exists());
}

#[test]
fn ablation_has_one_row_per_mode() {
    let out = tempfile::tempdir().unwrap();
    let rows = cmd_ablate(&small_config(vec![0, 1]), out.path()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.mode).collect::<Vec<_>>(),
        Mode::ALL.to_vec()
    );
    assert!(rows.iter().all(|r| r.bwt_mean.is_some()));
    let csv = fs::read_to_string(out.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(out.path().join("ce_baseline/seed1/metrics.json").is_file());
}

#[test]
fn missing_manifest_is_a_setup_error() {
    let cfg = CliConfig {
        data: DataSource::Manifest("/definitely/not/here.txt".into()),
        run: small_run(),
        seeds: vec![0],
    };
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_run(&cfg, out.path()), Err(CmdError::Setup(_))));
}

#[test]
fn shipped_benchmark_config_matches_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_benchmark.conf");
    let cfg = CliConfig::load(&path).unwrap();
    assert_eq!(cfg, sccl::config::benchmark_config());

    let paper = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_defaults.conf");
    let cfg = CliConfig::load(&paper).unwrap();
    assert_eq!(cfg.run, RunConfig::default());
    assert!(matches!(cfg.data, DataSource::Manifest(_)));
}
