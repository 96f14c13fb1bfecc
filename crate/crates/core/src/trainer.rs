//! Task-by-task training: contrastive updates with optional relation
//! distillation, periodic replay from the exemplar memory, post-task
//! exemplar selection and evaluation on every task seen so far.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_iter, Example, Input, TaskSequence, TaskSpec};
use crate::diffcore::{linear_lr, AdamConfig, AdamState, Tape, Tensor2};
use crate::encoder::{EncoderSnapshot, EncoderState, HashingConfig};
use crate::knn::evaluate_task;
use crate::losses::{ce_head_loss, supcon_loss, total_loss, CeHead, TemperatureConfig};
use crate::memory::MemoryBuffer;
use crate::metrics::{MetricsReport, RMatrix, StepAccounting};
use crate::rng::derive_seed;
use crate::selector::{select_samples, SelectConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Contrastive loss, relation distillation and replay.
    Sccl,
    ScclNoMr,
    ScclNoIrd,
    /// Contrastive fine-tuning with no forgetting countermeasures.
    ClOnly,
    /// Cross-entropy fine-tuning with one linear head per task.
    CeBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Sccl,
        Mode::ScclNoMr,
        Mode::ScclNoIrd,
        Mode::ClOnly,
        Mode::CeBaseline,
    ];

    pub fn uses_ird(self) -> bool {
        matches!(self, Mode::Sccl | Mode::ScclNoMr)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Mode::Sccl | Mode::ScclNoIrd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sccl => "sccl",
            Mode::ScclNoMr => "sccl_no_mr",
            Mode::ScclNoIrd => "sccl_no_ird",
            Mode::ClOnly => "cl_only",
            Mode::CeBaseline => "ce_baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Replay after every `replay_every` main-loop steps.
    pub replay_every: usize,
    pub replay_batch_size: usize,
    /// Exemplars kept per task.
    pub memory_per_task: usize,
    pub clusters_per_label: usize,
    pub temperatures: TemperatureConfig,
    pub k: usize,
    pub seed: u64,
    pub hashing: HashingConfig,
    /// Output widths of the MLP layers.
    pub widths: Vec<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sccl,
            batch_size: 96,
            epochs: 10,
            base_lr: 3e-5,
            replay_every: 100,
            replay_batch_size: 96,
            memory_per_task: 200,
            clusters_per_label: 4,
            temperatures: TemperatureConfig::default(),
            k: 10,
            seed: 0,
            hashing: HashingConfig::default(),
            widths: vec![256, 128],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.temperatures.validate()?;
        self.hashing.validate()?;
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("replay_every", self.replay_every),
            ("replay_batch_size", self.replay_batch_size),
            ("memory_per_task", self.memory_per_task),
            ("clusters_per_label", self.clusters_per_label),
            ("k", self.k),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 || self.replay_batch_size < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {}", self.base_lr)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("widths {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            base_lr: self.base_lr,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&body))
    }
}

/// Prefixes a non-finite error raised inside an update with where it happened.
fn at_step(task: u32, step: usize, replay: bool) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!(
            "task {task} step {step}{}: {msg}",
            if replay { " (replay)" } else { "" }
        )),
        other => other,
    }
}

/// Main-loop steps (1-based, per task) after which a replay update runs.
pub fn replay_schedule(total_steps: usize, every: usize) -> Vec<usize> {
    if every == 0 {
        return Vec::new();
    }
    (1..=total_steps).filter(|t| t % every == 0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Main-loop step within the task, 1-based. Replay updates carry the
    /// step that triggered them.
    pub step: usize,
    pub task: u32,
    pub loss_cl: f64,
    pub loss_ird: Option<f64>,
    pub lr: f64,
    pub replay: bool,
}

/// Hooks for persisting progress while a sequence runs.
pub trait RunObserver {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_task_end(&mut self, _state: &RunState, _task_index: usize) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Clone, Debug)]
pub struct RunState {
    pub encoder: EncoderState,
    /// Encoder frozen at the end of the previous task.
    pub prev_snapshot: Option<EncoderSnapshot>,
    pub buffer: MemoryBuffer,
    pub optimizer: Option<AdamState>,
    pub rmatrix: RMatrix,
    pub heads: BTreeMap<u32, CeHead>,
    pub accounting: StepAccounting,
    pub log: Vec<StepRecord>,
    /// Task ids trained so far, in order.
    pub trained: Vec<u32>,
}

impl RunState {
    pub fn new(cfg: &RunConfig, n_tasks: usize) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderState::new(
            cfg.hashing.clone(),
            &cfg.widths,
            derive_seed(cfg.seed, "encoder", &[]),
        )?;
        Ok(Self {
            encoder,
            prev_snapshot: None,
            buffer: MemoryBuffer::new(),
            optimizer: None,
            rmatrix: RMatrix::new(n_tasks),
            heads: BTreeMap::new(),
            accounting: StepAccounting::default(),
            log: Vec::new(),
            trained: Vec::new(),
        })
    }

    /// Trains on one task's train split for `cfg.epochs` epochs.
    pub fn train_task(
        &mut self,
        task: &TaskSpec,
        cfg: &RunConfig,
        obs: &mut dyn RunObserver,
    ) -> Result<()> {
        if self.trained.contains(&task.task_id) {
            return Err(Error::InvalidState(format!(
                "task {} already trained",
                task.task_id
            )));
        }
        let snapshot_print = self
            .prev_snapshot
            .as_ref()
            .map(EncoderSnapshot::fingerprint);

        let mut batches: Vec<Vec<&Example>> = Vec::new();
        for epoch in 0..cfg.epochs {
            for b in batch_iter(task, cfg.batch_size, cfg.seed, epoch as u64)? {
                if b.len() >= 2 {
                    batches.push(b);
                } else {
                    log::warn!(
                        "task {}: skipping a batch of {} example",
                        task.task_id,
                        b.len()
                    );
                }
            }
        }
        let total = batches.len();
        let ce = cfg.mode == Mode::CeBaseline;
        if ce {
            let labels: Vec<u32> = task.labels.iter().copied().collect();
            self.heads.insert(
                task.task_id,
                CeHead::zeros(task.task_id, labels, self.encoder.output_dim()),
            );
        }

        let mut shapes = self.encoder.param_shapes();
        let mut names = self.encoder.param_names();
        if ce {
            let head = &self.heads[&task.task_id];
            shapes.extend([head.weight.shape(), head.bias.shape()]);
            names.extend([
                format!("head{}.weight", task.task_id),
                format!("head{}.bias", task.task_id),
            ]);
        }
        let mut adam = AdamState::new(cfg.adam(), shapes);
        let replay_seed = derive_seed(cfg.seed, "replay", &[u64::from(task.task_id)]);
        let mut replays = 0;

        for (i, batch) in batches.iter().enumerate() {
            let t = i + 1;
            let lr = linear_lr(cfg.base_lr, i, total);
            let rec = if ce {
                self.ce_step(task.task_id, batch, &mut adam, &names, lr, t)
                    .map_err(at_step(task.task_id, t, false))?
            } else {
                let snap = self.prev_snapshot.take();
                let prev = if cfg.mode.uses_ird() {
                    snap.as_ref()
                } else {
                    None
                };
                let out = self.contrastive_step(
                    task.task_id,
                    batch,
                    prev,
                    cfg,
                    &mut adam,
                    &names,
                    lr,
                    t,
                    false,
                );
                self.prev_snapshot = snap;
                out.map_err(at_step(task.task_id, t, false))?
            };
            obs.on_step(&rec)?;
            self.log.push(rec);

            if cfg.mode.uses_replay() && t % cfg.replay_every == 0 && !self.buffer.is_empty() {
                let replay: Vec<Example> = self
                    .buffer
                    .replay_batch(cfg.replay_batch_size, replay_seed, t as u64)
                    .into_iter()
                    .cloned()
                    .collect();
                if replay.len() >= 2 {
                    let refs: Vec<&Example> = replay.iter().collect();
                    let rec = self
                        .contrastive_step(
                            task.task_id,
                            &refs,
                            None,
                            cfg,
                            &mut adam,
                            &names,
                            lr,
                            t,
                            true,
                        )
                        .map_err(at_step(task.task_id, t, true))?;
                    obs.on_step(&rec)?;
                    self.log.push(rec);
                    replays += 1;
                }
            }
        }

        if let (Some(before), Some(snap)) = (snapshot_print, &self.prev_snapshot) {
            if before != snap.fingerprint() {
                return Err(Error::InvalidState(
                    "previous-task snapshot changed during training".into(),
                ));
            }
        }
        self.optimizer = Some(adam);
        self.accounting.steps.push(total);
        self.accounting.replay_steps.push(replays);
        self.accounting.total_updates += total + replays;
        self.trained.push(task.task_id);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn contrastive_step(
        &mut self,
        task: u32,
        batch: &[&Example],
        prev: Option<&EncoderSnapshot>,
        cfg: &RunConfig,
        adam: &mut AdamState,
        names: &[String],
        lr: f64,
        step: usize,
        replay: bool,
    ) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let inputs: Vec<&Input> = batch.iter().map(|e| &e.input).collect();
        let enc = self.encoder.encode_on_tape(&mut tape, &inputs)?;
        let (loss, cl, ird) = if replay {
            let labels: Vec<u32> = batch.iter().map(|e| e.label).collect();
            let l = supcon_loss(&mut tape, enc.reps, &labels, cfg.temperatures.kappa)?;
            (l.loss, tape.scalar(l.loss), None)
        } else {
            let parts = total_loss(&mut tape, enc.reps, batch, prev, &cfg.temperatures)?;
            (parts.total, parts.cl, parts.ird)
        };
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor2> = enc
            .params
            .iter()
            .zip(self.encoder.param_shapes())
            .map(|(v, s)| grads.get_or_zeros(*v, s))
            .collect();
        adam.step(&mut self.encoder.params_mut(), &g, names, lr)?;
        Ok(StepRecord {
            step,
            task,
            loss_cl: cl,
            loss_ird: ird,
            lr,
            replay,
        })
    }

    fn ce_step(
        &mut self,
        task: u32,
        batch: &[&Example],
        adam: &mut AdamState,
        names: &[String],
        lr: f64,
        step: usize,
    ) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let inputs: Vec<&Input> = batch.iter().map(|e| &e.input).collect();
        let enc = self.encoder.encode_on_tape(&mut tape, &inputs)?;
        let head = self
            .heads
            .get_mut(&task)
            .expect("head created at task start");
        let w = tape.param(head.weight.clone());
        let b = tape.param(head.bias.clone());
        let labels: Vec<u32> = batch.iter().map(|e| e.label).collect();
        let loss = ce_head_loss(&mut tape, enc.reps, &labels, head, w, b)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor2> = enc
            .params
            .iter()
            .zip(self.encoder.param_shapes())
            .map(|(v, s)| grads.get_or_zeros(*v, s))
            .collect();
        g.push(grads.get_or_zeros(w, head.weight.shape()));
        g.push(grads.get_or_zeros(b, head.bias.shape()));
        let mut params = self.encoder.params_mut();
        params.push(&mut head.weight);
        params.push(&mut head.bias);
        adam.step(&mut params, &g, names, lr)?;
        Ok(StepRecord {
            step,
            task,
            loss_cl: value,
            loss_ird: None,
            lr,
            replay: false,
        })
    }

    /// Selects and buffers the task's exemplars, freezes the encoder as the
    /// next task's distillation reference, and fills row `index` of the
    /// accuracy matrix for tasks `0..=index` of `seq`.
    pub fn finish_task(&mut self, seq: &TaskSequence, index: usize, cfg: &RunConfig) -> Result<()> {
        let task = &seq.tasks[index];
        if self.trained.last() != Some(&task.task_id) {
            return Err(Error::InvalidState(format!(
                "task {} has not just been trained",
                task.task_id
            )));
        }
        let select = SelectConfig::new(cfg.memory_per_task, cfg.clusters_per_label);
        let exemplars = select_samples(
            task,
            &self.encoder,
            &select,
            derive_seed(cfg.seed, "select", &[]),
        )?;
        self.buffer.add_task_exemplars(task.task_id, exemplars)?;
        self.prev_snapshot = Some(self.encoder.snapshot());
        for (j, seen) in seq.tasks[..=index].iter().enumerate() {
            let a = self.evaluate(seen, cfg)?;
            self.rmatrix.set(index, j, a)?;
        }
        Ok(())
    }

    /// Accuracy on a task's test split: kNN over its exemplars, or the
    /// task's linear head in cross-entropy mode.
    pub fn evaluate(&self, task: &TaskSpec, cfg: &RunConfig) -> Result<f64> {
        if cfg.mode == Mode::CeBaseline {
            let head = self
                .heads
                .get(&task.task_id)
                .ok_or_else(|| Error::NotFound(format!("no head for task {}", task.task_id)))?;
            let refs: Vec<&Example> = task.test.iter().collect();
            if refs.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "task {} has an empty test split",
                    task.task_id
                )));
            }
            let reps = self.encoder.encode_all(&refs, 256)?;
            let pred = head.predict(&reps)?;
            let correct = pred
                .iter()
                .zip(&task.test)
                .filter(|(p, e)| **p == e.label)
                .count();
            Ok(correct as f64 / refs.len() as f64)
        } else {
            evaluate_task(
                &self.buffer,
                task,
                &self.encoder,
                cfg.k,
                cfg.temperatures.t_infer,
            )
        }
    }
}

pub fn run_sequence(seq: &TaskSequence, cfg: &RunConfig) -> Result<(RunState, MetricsReport)> {
    run_sequence_observed(seq, cfg, &mut NoObserver)
}

pub fn run_sequence_observed(
    seq: &TaskSequence,
    cfg: &RunConfig,
    obs: &mut dyn RunObserver,
) -> Result<(RunState, MetricsReport)> {
    seq.validate()?;
    let mut state = RunState::new(cfg, seq.tasks.len())?;
    for (i, task) in seq.tasks.iter().enumerate() {
        log::info!(
            "{} seed {}: task {} ({}/{})",
            cfg.mode,
            cfg.seed,
            task.task_id,
            i + 1,
            seq.tasks.len()
        );
        state.train_task(task, cfg, obs)?;
        state.finish_task(seq, i, cfg)?;
        obs.on_task_end(&state, i)?;
    }
    let report = MetricsReport::from_rmatrix(
        state.rmatrix.clone(),
        cfg.mode.as_str(),
        cfg.seed,
        &cfg.hash(),
        &seq.order_name,
        state.accounting.clone(),
    )?;
    Ok((state, report))
}
