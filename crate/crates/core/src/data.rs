//! Examples, tasks, dataset ingestion, the synthetic task generator and
//! label-stratified batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::{Error, Result};

/// Either raw text (hashed by the encoder) or a dense feature vector fed to
/// the first layer directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Text(String),
    RawFeatures(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub task: u32,
    pub label: u32,
    #[serde(flatten)]
    pub input: Input,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub labels: BTreeSet<u32>,
    /// Original label names keyed by global id.
    pub label_names: BTreeMap<u32, String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "task {} has no labels",
                self.task_id
            )));
        }
        for ex in self.train.iter().chain(&self.test) {
            if !self.labels.contains(&ex.label) {
                return Err(Error::InvalidLabel {
                    label: ex.label,
                    detail: format!("example {} is outside task {}", ex.id, self.task_id),
                });
            }
            if ex.task != self.task_id {
                return Err(Error::InvalidDataset(format!(
                    "example {} tagged task {} inside task {}",
                    ex.id, ex.task, self.task_id
                )));
            }
        }
        Ok(())
    }

    /// Train examples grouped by label, in label order.
    pub fn train_by_label(&self) -> BTreeMap<u32, Vec<&Example>> {
        let mut out: BTreeMap<u32, Vec<&Example>> =
            self.labels.iter().map(|&l| (l, Vec::new())).collect();
        for ex in &self.train {
            out.entry(ex.label).or_default().push(ex);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub order_name: String,
}

impl TaskSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidDataset("empty task sequence".into()));
        }
        let mut ids = BTreeSet::new();
        let mut seen_labels = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !ids.insert(t.task_id) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate task id {}",
                    t.task_id
                )));
            }
            for &l in &t.labels {
                if !seen_labels.insert(l) {
                    return Err(Error::InvalidLabel {
                        label: l,
                        detail: format!("shared by task {} and an earlier task", t.task_id),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn task(&self, task_id: u32) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

/// Hands out globally disjoint label ids and unique example ids while
/// loading several files.
#[derive(Clone, Debug, Default)]
pub struct IdSpace {
    next_label: u32,
    next_example: u64,
}

impl IdSpace {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Deserialize)]
struct Record {
    text: Option<String>,
    raw_features: Option<Vec<f64>>,
    label: serde_json::Value,
    split: String,
}

/// Loads one task from a JSON Lines file of `{text, label, split}` records.
///
/// Label names are sorted and mapped onto fresh global ids from `ids`.
pub fn load_jsonl(path: &Path, task_id: u32, ids: &mut IdSpace) -> Result<TaskSpec> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let label = match rec.label {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            other => {
                return Err(parse_err(
                    lineno,
                    format!("unsupported label value {other}"),
                ))
            }
        };
        let input = match (rec.text, rec.raw_features) {
            (Some(t), None) => Input::Text(t),
            (None, Some(f)) => Input::RawFeatures(f),
            _ => {
                return Err(parse_err(
                    lineno,
                    "exactly one of `text` or `raw_features` is required".into(),
                ))
            }
        };
        let is_train = match rec.split.as_str() {
            "train" => true,
            "test" => false,
            s => {
                return Err(parse_err(
                    lineno,
                    format!("split must be train or test, got {s:?}"),
                ))
            }
        };
        rows.push((label, input, is_train));
    }

    let names: BTreeSet<&str> = rows.iter().map(|(l, _, _)| l.as_str()).collect();
    if names.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{} has no labelled records",
            path.display()
        )));
    }
    let mapping: BTreeMap<&str, u32> = names
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, ids.next_label + i as u32))
        .collect();
    ids.next_label += names.len() as u32;

    let mut task = TaskSpec {
        task_id,
        labels: mapping.values().copied().collect(),
        label_names: mapping.iter().map(|(&n, &l)| (l, n.to_string())).collect(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (label, input, is_train) in rows.iter().cloned() {
        let ex = Example {
            id: ids.next_example,
            task: task_id,
            label: mapping[label.as_str()],
            input,
        };
        ids.next_example += 1;
        if is_train {
            task.train.push(ex);
        } else {
            task.test.push(ex);
        }
    }
    Ok(task)
}

/// Reads a task-order manifest: one dataset path per line, `#` comments,
/// relative paths resolved against the manifest's directory.
pub fn manifest_paths(manifest: &Path) -> Result<Vec<PathBuf>> {
    let body = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect();
    if paths.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "manifest {} lists no datasets",
            manifest.display()
        )));
    }
    Ok(paths)
}

pub fn load_manifest(manifest: &Path) -> Result<TaskSequence> {
    let mut ids = IdSpace::new();
    let tasks = manifest_paths(manifest)?
        .iter()
        .enumerate()
        .map(|(i, p)| load_jsonl(p, i as u32, &mut ids))
        .collect::<Result<Vec<_>>>()?;
    let seq = TaskSequence {
        tasks,
        order_name: manifest
            .file_stem()
            .map_or_else(|| "manifest".into(), |s| s.to_string_lossy().into_owned()),
    };
    seq.validate()?;
    Ok(seq)
}

/// Parameters of the synthetic text benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub labels_per_task: usize,
    pub train_per_label: usize,
    pub test_per_label: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Probability that a token is drawn from the label's own vocabulary
    /// rather than the shared noise distribution.
    pub signal_share: f64,
    /// Probability that a non-signal token comes from the example's
    /// distractor label (one other label, fixed per example).
    pub distractor_share: f64,
}

impl SyntheticSpec {
    pub fn new(
        n_tasks: usize,
        labels_per_task: usize,
        train_per_label: usize,
        test_per_label: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_tasks,
            labels_per_task,
            train_per_label,
            test_per_label,
            vocab_size,
            seed,
            signal_share: 0.35,
            distractor_share: 0.6,
        }
    }
}

const MIN_LEN: usize = 10;
const MAX_LEN: usize = 30;

struct LabelVocab {
    tokens: Vec<usize>,
    cumulative: Vec<f64>,
}

impl LabelVocab {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty vocabulary");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.tokens[i.min(self.tokens.len() - 1)]
    }
}

/// Generates a sequence of text-classification tasks over synthetic tokens.
///
/// Every label owns a weighted vocabulary drawn from `vocab_size` tokens
/// `w0..`. Each example also picks one distractor label (from any task);
/// its non-signal tokens come from that label's vocabulary with
/// probability `distractor_share`, otherwise from uniform noise over the
/// whole vocabulary plus a small pool of filler tokens `n0..`. Sequence
/// lengths are uniform in 10..=30.
pub fn gen_synthetic_tasks(spec: &SyntheticSpec) -> Result<TaskSequence> {
    let SyntheticSpec {
        n_tasks,
        labels_per_task,
        train_per_label,
        test_per_label,
        vocab_size,
        seed,
        signal_share,
        distractor_share,
    } = *spec;
    if n_tasks == 0
        || labels_per_task == 0
        || train_per_label == 0
        || test_per_label == 0
        || vocab_size == 0
    {
        return Err(Error::InvalidInput(format!(
            "synthetic counts must be >= 1: {spec:?}"
        )));
    }
    for (name, v) in [
        ("signal_share", signal_share),
        ("distractor_share", distractor_share),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("{name} {v} outside [0, 1]")));
        }
    }

    let n_labels = n_tasks * labels_per_task;
    let own = (vocab_size / 10).max(1);
    let fillers = (vocab_size / 20).max(1);
    let mut vocab_rng = stream(seed, "synthetic-vocab", &[]);
    let vocabs: Vec<LabelVocab> = (0..n_labels)
        .map(|_| {
            let tokens = rand::seq::index::sample(&mut vocab_rng, vocab_size, own.min(vocab_size))
                .into_vec();
            let mut acc = 0.0;
            let cumulative = tokens
                .iter()
                .map(|_| {
                    let u: f64 = vocab_rng.random_range(0.2..1.0);
                    acc += u * u;
                    acc
                })
                .collect();
            LabelVocab { tokens, cumulative }
        })
        .collect();

    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let labels: Vec<u32> = (0..labels_per_task)
            .map(|c| (t * labels_per_task + c) as u32)
            .collect();
        let mut task = TaskSpec {
            task_id: t as u32,
            labels: labels.iter().copied().collect(),
            label_names: labels.iter().map(|&l| (l, format!("label{l}"))).collect(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for (split, per_label) in [(0u64, train_per_label), (1, test_per_label)] {
            for &label in &labels {
                let mut rng = stream(seed, "synthetic-text", &[t as u64, u64::from(label), split]);
                for _ in 0..per_label {
                    let len = rng.random_range(MIN_LEN..=MAX_LEN);
                    let distractor = (n_labels > 1).then(|| {
                        let d = rng.random_range(0..n_labels - 1);
                        if d >= label as usize {
                            d + 1
                        } else {
                            d
                        }
                    });
                    let words: Vec<String> = (0..len)
                        .map(|_| {
                            if rng.random::<f64>() < signal_share {
                                format!("w{}", vocabs[label as usize].sample(&mut rng))
                            } else if let Some(d) =
                                distractor.filter(|_| rng.random::<f64>() < distractor_share)
                            {
                                format!("w{}", vocabs[d].sample(&mut rng))
                            } else if rng.random::<f64>() < 0.8 {
                                format!("w{}", rng.random_range(0..vocab_size))
                            } else {
                                format!("n{}", rng.random_range(0..fillers))
                            }
                        })
                        .collect();
                    let ex = Example {
                        id: next_id,
                        task: t as u32,
                        label,
                        input: Input::Text(words.join(" ")),
                    };
                    next_id += 1;
                    if split == 0 {
                        task.train.push(ex);
                    } else {
                        task.test.push(ex);
                    }
                }
            }
        }
        tasks.push(task);
    }
    Ok(TaskSequence {
        tasks,
        order_name: format!("synthetic-{n_tasks}x{labels_per_task}-seed{seed}"),
    })
}

/// Groups item positions by label into shuffled blocks of two (three when a
/// label has an odd count) so that a label present in a batch is present at
/// least twice. A label with a single item yields a singleton block.
pub(crate) fn label_blocks(labels: &[u32], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut blocks = Vec::new();
    for (_, mut idx) in by_label {
        idx.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(2).map(<[usize]>::to_vec).collect();
        if chunks.len() >= 2 && chunks.last().is_some_and(|c| c.len() == 1) {
            let tail = chunks.pop().expect("checked");
            chunks.last_mut().expect("checked").extend(tail);
        }
        blocks.extend(chunks);
    }
    blocks.shuffle(rng);
    blocks
}

/// Shuffled, label-stratified mini-batches over the train split for one
/// epoch. Batches partition the split and hold at most `batch_size`
/// examples; a batch may close one or two short of it rather than split a
/// label block. With `batch_size` 2, a label with an odd count produces one
/// batch of three. A trailing batch of one example is merged into the
/// previous batch.
pub fn batch_iter(
    task: &TaskSpec,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<&Example>>> {
    if batch_size < 2 {
        return Err(Error::InvalidInput(format!("batch size {batch_size} < 2")));
    }
    if task.train.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = stream(seed, "batch", &[u64::from(task.task_id), epoch]);
    let labels: Vec<u32> = task.train.iter().map(|e| e.label).collect();
    let blocks = label_blocks(&labels, &mut rng);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for block in blocks {
        if !current.is_empty() && current.len() + block.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(block);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(tail);
    }
    Ok(batches
        .into_iter()
        .map(|b| b.into_iter().map(|i| &task.train[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn load_counts_labels_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "a.jsonl",
            &[
                r#"{"text":"good movie","label":"pos","split":"train"}"#,
                r#"{"text":"bad movie","label":"neg","split":"train"}"#,
                r#"{"text":"great","label":"pos","split":"train"}"#,
                r#"{"text":"awful","label":"neg","split":"train"}"#,
                r#"{"text":"fine","label":"pos","split":"test"}"#,
                r#"{"text":"poor","label":"neg","split":"test"}"#,
            ],
        );
        let mut ids = IdSpace::new();
        let t = load_jsonl(&p, 0, &mut ids).unwrap();
        assert_eq!(t.labels.len(), 2);
        assert_eq!(t.train.len(), 4);
        assert_eq!(t.test.len(), 2);
        // sorted names: neg -> 0, pos -> 1
        assert_eq!(t.label_names[&0], "neg");
        assert_eq!(t.train[0].label, 1);
        t.validate().unwrap();
    }

    #[test]
    fn sequential_loads_have_disjoint_labels() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"text":"x","label":"pos","split":"train"}"#],
        );
        let b = write_lines(
            dir.path(),
            "b.jsonl",
            &[
                r#"{"text":"y","label":"pos","split":"train"}"#,
                r#"{"text":"z","label":3,"split":"test"}"#,
            ],
        );
        let mut ids = IdSpace::new();
        let ta = load_jsonl(&a, 0, &mut ids).unwrap();
        let tb = load_jsonl(&b, 1, &mut ids).unwrap();
        assert!(ta.labels.is_disjoint(&tb.labels));
        assert_ne!(ta.train[0].id, tb.train[0].id);
    }

    #[test]
    fn missing_label_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "bad.jsonl",
            &[
                r#"{"text":"ok","label":"a","split":"train"}"#,
                r#"{"text":"no label","split":"train"}"#,
            ],
        );
        let err = load_jsonl(&p, 0, &mut IdSpace::new()).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("label"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_invalid_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "empty.jsonl", &[]);
        assert!(matches!(
            load_jsonl(&p, 0, &mut IdSpace::new()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_lines(
            dir.path(),
            "a.jsonl",
            &[r#"{"text":"x","label":"p","split":"train"}"#],
        );
        write_lines(
            dir.path(),
            "b.jsonl",
            &[r#"{"text":"y","label":"q","split":"train"}"#],
        );
        let m = write_lines(
            dir.path(),
            "order1.txt",
            &["# order 1", "a.jsonl", "", "b.jsonl"],
        );
        let seq = load_manifest(&m).unwrap();
        assert_eq!(seq.tasks.len(), 2);
        assert_eq!(seq.order_name, "order1");
    }

    #[test]
    fn synthetic_counts() {
        let seq = gen_synthetic_tasks(&SyntheticSpec::new(4, 2, 50, 20, 500, 7)).unwrap();
        assert_eq!(seq.tasks.len(), 4);
        let labels: BTreeSet<u32> = seq
            .tasks
            .iter()
            .flat_map(|t| t.labels.iter().copied())
            .collect();
        assert_eq!(labels.len(), 8);
        for t in &seq.tasks {
            assert_eq!(t.train.len(), 100);
            assert_eq!(t.test.len(), 40);
        }
        seq.validate().unwrap();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(3, 2, 10, 5, 100, 11);
        let a = serde_json::to_vec(&gen_synthetic_tasks(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&gen_synthetic_tasks(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other =
            serde_json::to_vec(&gen_synthetic_tasks(&SyntheticSpec { seed: 12, ..spec }).unwrap())
                .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synthetic_degenerate_boundary() {
        let seq = gen_synthetic_tasks(&SyntheticSpec::new(1, 1, 1, 1, 10, 0)).unwrap();
        assert_eq!(seq.tasks.len(), 1);
        assert_eq!(seq.tasks[0].train.len(), 1);
        assert!(gen_synthetic_tasks(&SyntheticSpec::new(0, 1, 1, 1, 10, 0)).is_err());
    }

    #[test]
    fn batches_partition_the_split() {
        let seq = gen_synthetic_tasks(&SyntheticSpec::new(1, 2, 50, 1, 50, 3)).unwrap();
        let task = &seq.tasks[0];
        let batches = batch_iter(task, 96, 1, 0).unwrap();
        assert_eq!(batches[0].len(), 96);
        let mut ids: Vec<u64> = batches.iter().flatten().map(|e| e.id).collect();
        ids.sort_unstable();
        let mut want: Vec<u64> = task.train.iter().map(|e| e.id).collect();
        want.sort_unstable();
        assert_eq!(ids, want);
    }

    #[test]
    fn batches_are_stratified_and_reproducible() {
        let seq = gen_synthetic_tasks(&SyntheticSpec::new(1, 5, 7, 1, 50, 3)).unwrap();
        let task = &seq.tasks[0];
        let a = batch_iter(task, 8, 9, 2).unwrap();
        let b = batch_iter(task, 8, 9, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, batch_iter(task, 8, 9, 3).unwrap());
        for batch in &a {
            let mut counts = BTreeMap::new();
            for e in batch {
                *counts.entry(e.label).or_insert(0) += 1;
            }
            assert!(counts.values().all(|&c| c >= 2), "{counts:?}");
        }
    }

    #[test]
    fn singleton_label_yields_anchor_without_positive() {
        let mut task = gen_synthetic_tasks(&SyntheticSpec::new(1, 2, 4, 1, 50, 3))
            .unwrap()
            .tasks
            .remove(0);
        let keep = task.train.iter().find(|x| x.label == 1).unwrap().id;
        task.train.retain(|e| e.label == 0 || e.id == keep);
        let batches = batch_iter(&task, 16, 0, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].iter().filter(|e| e.label == 1).count(), 1);
    }

    #[test]
    fn empty_split_gives_no_batches() {
        let mut task = gen_synthetic_tasks(&SyntheticSpec::new(1, 2, 4, 1, 50, 3))
            .unwrap()
            .tasks
            .remove(0);
        task.train.clear();
        assert!(batch_iter(&task, 4, 0, 0).unwrap().is_empty());
        assert!(batch_iter(&task, 1, 0, 0).is_err());
    }
}
