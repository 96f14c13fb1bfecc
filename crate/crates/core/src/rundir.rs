//! Run directories and the experiment commands built on them.
//!
//! One seed's directory holds:
//!
//! ```text
//! config.txt              canonical config, single seed; reruns the seed
//! loss_log.csv            step,task,loss_cl,loss_ird,lr,replay
//! rmatrix.csv             accuracy matrix, empty cells for j > i
//! metrics.json            MetricsReport
//! encoder_task{t}.json    checkpoint after each task
//! buffer/                 exemplar memory after the last finished task
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::CliConfig;
use crate::data::{Example, TaskSequence};
use crate::encoder::EncoderState;
use crate::memory::MemoryBuffer;
use crate::metrics::{knn_sweep, sweep_csv, MetricsReport, SweepRow};
use crate::trainer::{run_sequence_observed, Mode, RunObserver, RunState, StepRecord};
use crate::{Error, Result};

pub const DEFAULT_SWEEP_K: [usize; 5] = [1, 5, 10, 20, 50];
pub const EMBEDDING_MAGIC: &[u8; 4] = b"SCEM";

/// Failures split by whether anything ran: setup problems (bad config,
/// unreadable data) versus aborts once work has started.
#[derive(Debug)]
pub enum CmdError {
    Setup(Error),
    Runtime(Error),
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Setup(e) => write!(f, "configuration error: {e}"),
            CmdError::Runtime(e) => write!(f, "run aborted: {e}"),
        }
    }
}

impl std::error::Error for CmdError {}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

fn setup<T>(r: Result<T>) -> CmdResult<T> {
    r.map_err(CmdError::Setup)
}

fn runtime<T>(r: Result<T>) -> CmdResult<T> {
    r.map_err(CmdError::Runtime)
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss_log.csv")
    }

    pub fn rmatrix(&self) -> PathBuf {
        self.root.join("rmatrix.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn encoder(&self, task_id: u32) -> PathBuf {
        self.root.join(format!("encoder_task{task_id}.json"))
    }

    pub fn buffer(&self) -> PathBuf {
        self.root.join("buffer")
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep_k.csv")
    }

    pub fn embeddings(&self, task_id: u32) -> PathBuf {
        self.root.join(format!("embeddings_task{task_id}.bin"))
    }

    pub fn embedding_labels(&self, task_id: u32) -> PathBuf {
        self.root
            .join(format!("embeddings_task{task_id}_labels.csv"))
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Persists progress as training goes so an abort leaves usable logs.
struct DirObserver<'a> {
    dir: &'a RunDir,
    log: BufWriter<File>,
    seq: &'a TaskSequence,
}

impl<'a> DirObserver<'a> {
    fn new(dir: &'a RunDir, seq: &'a TaskSequence) -> Result<Self> {
        let path = dir.loss_log();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = BufWriter::new(file);
        writeln!(log, "step,task,loss_cl,loss_ird,lr,replay").map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir, log, seq })
    }

    fn flush(&mut self) -> Result<()> {
        self.log
            .flush()
            .map_err(|e| Error::io(self.dir.loss_log(), e))
    }
}

impl RunObserver for DirObserver<'_> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        let ird = r.loss_ird.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.log,
            "{},{},{},{},{},{}",
            r.step,
            r.task,
            r.loss_cl,
            ird,
            r.lr,
            u8::from(r.replay)
        )
        .map_err(|e| Error::io(self.dir.loss_log(), e))
    }

    fn on_task_end(&mut self, state: &RunState, index: usize) -> Result<()> {
        self.flush()?;
        let task_id = self.seq.tasks[index].task_id;
        state.encoder.save(&self.dir.encoder(task_id))?;
        state.buffer.save(&self.dir.buffer())?;
        write_file(&self.dir.rmatrix(), state.rmatrix.to_csv().as_bytes())
    }
}

/// Trains one seed into `dir` and writes its metrics.
pub fn run_seed(
    cfg: &CliConfig,
    seq: &TaskSequence,
    seed: u64,
    dir: &RunDir,
) -> CmdResult<MetricsReport> {
    runtime(fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e)))?;
    let single = CliConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    runtime(write_file(&dir.config(), single.render().as_bytes()))?;
    let run = cfg.run_for(seed);
    let mut obs = runtime(DirObserver::new(dir, seq))?;
    let result = run_sequence_observed(seq, &run, &mut obs);
    runtime(obs.flush())?;
    let (_, report) = runtime(result)?;
    runtime(write_file(
        &dir.rmatrix(),
        report.rmatrix.to_csv().as_bytes(),
    ))?;
    runtime(write_file(&dir.metrics(), &pretty_json(&report)?))?;
    Ok(report)
}

fn pretty_json<T: Serialize>(v: &T) -> CmdResult<Vec<u8>> {
    let mut body = runtime(serde_json::to_vec_pretty(v).map_err(Error::from))?;
    body.push(b'\n');
    Ok(body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub accs: Vec<f64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// Per-seed BWT; `None` for single-task sequences.
    pub bwts: Option<Vec<f64>>,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Aggregate {
    pub fn from_reports(mode: Mode, reports: &[MetricsReport]) -> Self {
        let accs: Vec<f64> = reports.iter().map(|r| r.acc).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let bwts: Option<Vec<f64>> = reports.iter().map(|r| r.bwt).collect();
        let stats = bwts.as_deref().map(mean_std);
        Self {
            mode,
            seeds: reports.iter().map(|r| r.seed).collect(),
            accs,
            acc_mean,
            acc_std,
            bwt_mean: stats.map(|s| s.0),
            bwt_std: stats.map(|s| s.1),
            bwts,
        }
    }
}

/// Runs every seed of `cfg` under `out/seed{s}` and writes `aggregate.json`.
pub fn cmd_run(cfg: &CliConfig, out: &Path) -> CmdResult<Aggregate> {
    let seq = setup(cfg.data.load())?;
    setup(seq.validate())?;
    run_all_seeds(cfg, &seq, out)
}

fn run_all_seeds(cfg: &CliConfig, seq: &TaskSequence, out: &Path) -> CmdResult<Aggregate> {
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = RunDir::new(out.join(format!("seed{seed}")));
        reports.push(run_seed(cfg, seq, seed, &dir)?);
    }
    let agg = Aggregate::from_reports(cfg.run.mode, &reports);
    runtime(write_file(&out.join("aggregate.json"), &pretty_json(&agg)?))?;
    Ok(agg)
}

/// Runs all five modes on the same data and seeds under `out/{mode}` and
/// writes `ablation.csv` (mode, ACC and BWT mean and std).
pub fn cmd_ablate(cfg: &CliConfig, out: &Path) -> CmdResult<Vec<Aggregate>> {
    let seq = setup(cfg.data.load())?;
    setup(seq.validate())?;
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let mut c = cfg.clone();
        c.run.mode = mode;
        rows.push(run_all_seeds(&c, &seq, &out.join(mode.as_str()))?);
    }
    runtime(write_file(
        &out.join("ablation.csv"),
        ablation_csv(&rows).as_bytes(),
    ))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[Aggregate]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("mode,acc_mean,acc_std,bwt_mean,bwt_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode,
            r.acc_mean,
            r.acc_std,
            opt(r.bwt_mean),
            opt(r.bwt_std)
        ));
    }
    out
}

/// Human-readable table in percent.
pub fn ablation_table(rows: &[Aggregate]) -> String {
    let pct = |m: f64, s: f64| format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * s);
    let mut out = format!("{:<12} {:>15} {:>15}\n", "mode", "ACC", "BWT");
    for r in rows {
        let bwt = match (r.bwt_mean, r.bwt_std) {
            (Some(m), Some(s)) => pct(m, s),
            _ => "n/a".into(),
        };
        out.push_str(&format!(
            "{:<12} {:>15} {:>15}\n",
            r.mode.as_str(),
            pct(r.acc_mean, r.acc_std),
            bwt
        ));
    }
    out
}

/// The pieces of a finished run needed for re-evaluation.
pub struct LoadedRun {
    pub config: CliConfig,
    pub seq: TaskSequence,
    pub encoder: EncoderState,
    pub buffer: MemoryBuffer,
    pub report: MetricsReport,
}

pub fn load_run(dir: &RunDir) -> Result<LoadedRun> {
    if !dir.root.is_dir() {
        return Err(Error::NotFound(format!(
            "run directory {}",
            dir.root.display()
        )));
    }
    let config = CliConfig::load(&dir.config())?;
    let seq = config.data.load()?;
    let path = dir.metrics();
    let body = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let report: MetricsReport = serde_json::from_slice(&body)?;
    let last = seq.tasks.last().expect("validated sequence").task_id;
    let encoder = EncoderState::load(&dir.encoder(last))?;
    let buffer = MemoryBuffer::load(&dir.buffer())?;
    Ok(LoadedRun {
        config,
        seq,
        encoder,
        buffer,
        report,
    })
}

/// Re-evaluates a finished run under each `k` and writes `sweep_k.csv`.
pub fn cmd_sweep_k(dir: &RunDir, k_values: &[usize]) -> CmdResult<Vec<SweepRow>> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(CmdError::Setup(Error::Config(format!(
            "k values {k_values:?}"
        ))));
    }
    let run = setup(load_run(dir))?;
    let rows = runtime(knn_sweep(
        &run.encoder,
        &run.buffer,
        &run.seq.tasks,
        k_values,
        run.config.run.temperatures.t_infer,
    ))?;
    runtime(write_file(&dir.sweep(), sweep_csv(&rows).as_bytes()))?;
    Ok(rows)
}

/// Writes the final encoder's representations of a task's test split then
/// its exemplars. Returns the number of rows.
///
/// The matrix file is `SCEM`, then little-endian u32 version (1), u64 rows,
/// u64 cols, then row-major f32 values. The labels CSV has one line per row.
pub fn cmd_dump_embeddings(dir: &RunDir, task_id: u32) -> CmdResult<usize> {
    let run = setup(load_run(dir))?;
    let task =
        setup(run.seq.task(task_id).ok_or_else(|| {
            Error::NotFound(format!("task {task_id} is not in the run's sequence"))
        }))?;
    let exemplars = setup(
        run.buffer
            .task(task_id)
            .ok_or_else(|| Error::NotFound(format!("no exemplars for task {task_id}"))),
    )?;
    let rows: Vec<(&str, &Example)> = task
        .test
        .iter()
        .map(|e| ("test", e))
        .chain(exemplars.iter().map(|e| ("exemplar", e)))
        .collect();
    let refs: Vec<&Example> = rows.iter().map(|(_, e)| *e).collect();
    let reps = runtime(run.encoder.encode_all(&refs, 256))?;

    let mut bin = Vec::with_capacity(24 + 4 * reps.values().len());
    bin.extend_from_slice(EMBEDDING_MAGIC);
    bin.extend_from_slice(&1u32.to_le_bytes());
    bin.extend_from_slice(&(reps.rows() as u64).to_le_bytes());
    bin.extend_from_slice(&(reps.cols() as u64).to_le_bytes());
    for v in reps.values() {
        bin.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    runtime(write_file(&dir.embeddings(task_id), &bin))?;

    let mut csv = String::from("row,source,example_id,label\n");
    for (i, (source, e)) in rows.iter().enumerate() {
        csv.push_str(&format!("{i},{source},{},{}\n", e.id, e.label));
    }
    runtime(write_file(&dir.embedding_labels(task_id), csv.as_bytes()))?;
    Ok(rows.len())
}

/// Reads an embedding dump back as (rows, cols, values).
pub fn read_embeddings(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding dump"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != 1 {
        return Err(bad("unsupported version"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = &bytes[24..];
    if body.len() != rows * cols * 4 {
        return Err(bad("length does not match header"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((rows, cols, values))
}
