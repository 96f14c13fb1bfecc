//! kNN inference over exemplars re-encoded by the current encoder.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::data::{Example, TaskSpec};
use crate::diffcore::Tensor2;
use crate::encoder::EncoderState;
use crate::memory::MemoryBuffer;
use crate::{Error, Result};

/// Exemplar representations of one task under a particular encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Criterion {
    pub task: u32,
    /// Unit-norm rows.
    pub reps: Tensor2,
    pub labels: Vec<u32>,
    pub ids: Vec<u64>,
}

impl Criterion {
    pub fn new(task: u32, reps: Tensor2, labels: Vec<u32>, ids: Vec<u64>) -> Result<Self> {
        if reps.rows() != labels.len() || reps.rows() != ids.len() {
            return Err(Error::dim(
                "criterion",
                format!(
                    "{} rows, {} labels, {} ids",
                    reps.rows(),
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        Ok(Self {
            task,
            reps,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Re-encodes a task's buffered exemplars with `encoder`.
pub fn build_criterion(
    buf: &MemoryBuffer,
    task_id: u32,
    encoder: &EncoderState,
) -> Result<Criterion> {
    let exemplars = buf
        .task(task_id)
        .ok_or_else(|| Error::NotFound(format!("task {task_id} has no buffered exemplars")))?;
    let refs: Vec<&Example> = exemplars.iter().collect();
    let reps = if refs.is_empty() {
        Tensor2::zeros(0, encoder.output_dim())
    } else {
        encoder.encode_all(&refs, 256)?
    };
    Criterion::new(
        task_id,
        reps,
        exemplars.iter().map(|e| e.label).collect(),
        exemplars.iter().map(|e| e.id).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: u32,
    pub probs: BTreeMap<u32, f64>,
    /// `(exemplar id, similarity)` in retrieval order.
    pub neighbors: Vec<(u64, f64)>,
    /// Set when `k` exceeded the criterion size.
    pub k_clamped: bool,
}

/// Retrieves the `k` most similar exemplars (dot product of unit vectors,
/// ties to the smaller exemplar id) and scores labels by
/// `Σ 1[y = y_i] exp(sim_i / T)`, normalized over retrieved labels. The
/// predicted label is the most probable one, ties to the smaller id.
pub fn knn_predict(query: &[f64], criterion: &Criterion, k: usize, t: f64) -> Result<Prediction> {
    if criterion.is_empty() {
        return Err(Error::NotFound(format!(
            "empty criterion for task {}",
            criterion.task
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if query.len() != criterion.reps.cols() {
        return Err(Error::dim(
            "knn_predict",
            format!(
                "query of {} vs criterion width {}",
                query.len(),
                criterion.reps.cols()
            ),
        ));
    }
    let k_clamped = k > criterion.len();
    let k = k.min(criterion.len());

    let mut scored: Vec<(f64, usize)> = (0..criterion.len())
        .map(|i| {
            let s: f64 = query
                .iter()
                .zip(criterion.reps.row(i))
                .map(|(a, b)| a * b)
                .sum();
            (s, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(criterion.ids[a.1].cmp(&criterion.ids[b.1]))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);

    // subtracting the top similarity leaves the normalized scores unchanged
    let top = scored[0].0;
    let mut weights: BTreeMap<u32, f64> = BTreeMap::new();
    for &(s, i) in &scored {
        *weights.entry(criterion.labels[i]).or_default() += ((s - top) / t).exp();
    }
    let z: f64 = weights.values().sum();
    let probs: BTreeMap<u32, f64> = weights.into_iter().map(|(l, w)| (l, w / z)).collect();
    let label = probs
        .iter()
        .fold(None, |best: Option<(u32, f64)>, (&l, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((l, p)),
        })
        .map(|(l, _)| l)
        .expect("at least one neighbour");

    Ok(Prediction {
        label,
        probs,
        neighbors: scored.iter().map(|&(s, i)| (criterion.ids[i], s)).collect(),
        k_clamped,
    })
}

/// Accuracy of kNN predictions on the task's test split, retrieving only
/// among that task's exemplars.
pub fn evaluate_task(
    buf: &MemoryBuffer,
    task: &TaskSpec,
    encoder: &EncoderState,
    k: usize,
    t: f64,
) -> Result<f64> {
    let criterion = build_criterion(buf, task.task_id, encoder)?;
    evaluate_with_criterion(&criterion, task, encoder, k, t)
}

pub fn evaluate_with_criterion(
    criterion: &Criterion,
    task: &TaskSpec,
    encoder: &EncoderState,
    k: usize,
    t: f64,
) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "task {} has an empty test split",
            task.task_id
        )));
    }
    let refs: Vec<&Example> = task.test.iter().collect();
    let reps = encoder.encode_all(&refs, 256)?;
    let mut correct = 0usize;
    for (r, ex) in task.test.iter().enumerate() {
        if knn_predict(reps.row(r), criterion, k, t)?.label == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.test.len() as f64)
}
