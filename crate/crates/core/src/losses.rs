//! Supervised contrastive loss, instance-wise relation distillation, their
//! sum, and the softmax cross-entropy head used by the fine-tuning baseline.

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::diffcore::{Tape, Tensor2, Var};
use crate::encoder::EncoderSnapshot;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    /// Contrastive temperature.
    pub kappa: f64,
    /// Relation-distillation temperature.
    pub tau: f64,
    /// kNN vote temperature.
    pub t_infer: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            kappa: 0.2,
            tau: 0.2,
            t_infer: 5.0,
        }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.kappa, self.tau, self.t_infer]
            .iter()
            .all(|t| *t > 0.0 && t.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "temperatures must be positive: {self:?}"
            )))
        }
    }
}

fn off_diagonal_mask(b: usize) -> Vec<bool> {
    (0..b * b).map(|i| i / b != i % b).collect()
}

fn check_batch(reps: &Tensor2, n_labels: Option<usize>) -> Result<usize> {
    let b = reps.rows();
    if b < 2 {
        return Err(Error::InvalidBatch(format!(
            "batch of {b} rows; at least 2 required"
        )));
    }
    if let Some(n) = n_labels {
        if n != b {
            return Err(Error::dim(
                "contrastive batch",
                format!("{b} rows but {n} labels"),
            ));
        }
    }
    Ok(b)
}

#[derive(Clone, Copy, Debug)]
pub struct SupConLoss {
    pub loss: Var,
    /// Anchors with at least one positive; 0 means the loss is identically 0.
    pub anchors: usize,
}

impl SupConLoss {
    pub fn no_positive_pairs(&self) -> bool {
        self.anchors == 0
    }
}

/// Supervised contrastive loss summed over anchors:
/// `Σ_j −1/|P(j)| Σ_{p∈P(j)} log softmax_{a≠j}(h_j·h_a/κ)[p]`.
/// Anchors without a same-label partner contribute nothing.
pub fn supcon_loss(tape: &mut Tape, reps: Var, labels: &[u32], kappa: f64) -> Result<SupConLoss> {
    let b = check_batch(tape.value(reps), Some(labels.len()))?;
    let mut weights = Tensor2::zeros(b, b);
    let mut anchors = 0;
    for j in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&p| p != j && labels[p] == labels[j])
            .collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let w = -1.0 / positives.len() as f64;
        for p in positives {
            weights.set(j, p, w);
        }
    }
    if anchors == 0 {
        log::warn!("contrastive batch of {b} has no positive pairs");
    }
    let gram = tape.matmul_nt(reps, reps)?;
    let logits = tape.scale(gram, 1.0 / kappa);
    let log_probs = tape.log_softmax_masked(logits, off_diagonal_mask(b))?;
    let weighted = tape.mul_const(log_probs, weights)?;
    Ok(SupConLoss {
        loss: tape.sum(weighted),
        anchors,
    })
}

/// `B × B` matrix of `softmax_{a≠j}(h_j·h_a/τ)` with a zero diagonal.
fn relation_matrix(reps: &Tensor2, tau: f64) -> Result<Tensor2> {
    let b = check_batch(reps, None)?;
    let gram = reps.matmul_nt(reps)?;
    let mut s = Tensor2::zeros(b, b);
    for j in 0..b {
        let m = (0..b)
            .filter(|&a| a != j)
            .map(|a| gram.get(j, a) / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b)
            .filter(|&a| a != j)
            .map(|a| (gram.get(j, a) / tau - m).exp())
            .sum();
        for a in (0..b).filter(|&a| a != j) {
            s.set(j, a, (gram.get(j, a) / tau - m).exp() / z);
        }
    }
    Ok(s)
}

/// Row-stochastic in-batch similarity distribution, `B × (B−1)`; row `j`
/// lists `s_{j,p}` for `p ≠ j` in ascending `p`.
pub fn ird_similarity(reps: &Tensor2, tau: f64) -> Result<Tensor2> {
    let full = relation_matrix(reps, tau)?;
    let b = full.rows();
    let mut out = Tensor2::zeros(b, b - 1);
    for j in 0..b {
        let row: Vec<f64> = (0..b).filter(|&p| p != j).map(|p| full.get(j, p)).collect();
        out.row_mut(j).copy_from_slice(&row);
    }
    Ok(out)
}

/// Relation distillation as a cross-entropy from the frozen model's
/// similarity distribution to the current one:
/// `−1/B² Σ_j Σ_{p≠j} s^prev_{j,p} log s^cur_{j,p}`.
pub fn ird_loss(tape: &mut Tape, cur: Var, prev: &Tensor2, tau: f64) -> Result<Var> {
    let cv = tape.value(cur);
    let b = check_batch(cv, None)?;
    if cv.shape() != prev.shape() {
        return Err(Error::dim(
            "ird_loss",
            format!("{:?} vs {:?}", cv.shape(), prev.shape()),
        ));
    }
    let scale = -1.0 / (b * b) as f64;
    let targets = relation_matrix(prev, tau)?.map(|s| s * scale);
    let gram = tape.matmul_nt(cur, cur)?;
    let logits = tape.scale(gram, 1.0 / tau);
    let log_probs = tape.log_softmax_masked(logits, off_diagonal_mask(b))?;
    let weighted = tape.mul_const(log_probs, targets)?;
    Ok(tape.sum(weighted))
}

/// `−1/B² Σ_j Σ_p s log s` of the frozen model's distribution; the minimum
/// of [`ird_loss`] over current representations.
pub fn ird_entropy_floor(prev: &Tensor2, tau: f64) -> Result<f64> {
    let s = relation_matrix(prev, tau)?;
    let b = s.rows() as f64;
    Ok(-s
        .values()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
        / (b * b))
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cl: f64,
    pub ird: Option<f64>,
    pub anchors: usize,
}

/// Contrastive loss of `reps`, plus relation distillation against `prev`
/// when a previous-task snapshot exists. The two terms are summed unweighted.
pub fn total_loss(
    tape: &mut Tape,
    reps: Var,
    batch: &[&Example],
    prev: Option<&EncoderSnapshot>,
    cfg: &TemperatureConfig,
) -> Result<LossParts> {
    let labels: Vec<u32> = batch.iter().map(|e| e.label).collect();
    let cl = supcon_loss(tape, reps, &labels, cfg.kappa)?;
    let cl_value = tape.scalar(cl.loss);
    let Some(snapshot) = prev else {
        return Ok(LossParts {
            total: cl.loss,
            cl: cl_value,
            ird: None,
            anchors: cl.anchors,
        });
    };
    let prev_reps = snapshot.encode_examples(batch)?;
    let ird = ird_loss(tape, reps, &prev_reps, cfg.tau)?;
    let ird_value = tape.scalar(ird);
    Ok(LossParts {
        total: tape.add(cl.loss, ird)?,
        cl: cl_value,
        ird: Some(ird_value),
        anchors: cl.anchors,
    })
}

/// Per-task linear classifier over representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeHead {
    pub task: u32,
    /// Global label ids in column order.
    pub labels: Vec<u32>,
    /// `d × C`.
    pub weight: Tensor2,
    /// `1 × C`.
    pub bias: Tensor2,
}

impl CeHead {
    pub fn zeros(task: u32, labels: Vec<u32>, dim: usize) -> Self {
        let c = labels.len();
        Self {
            task,
            labels,
            weight: Tensor2::zeros(dim, c),
            bias: Tensor2::zeros(1, c),
        }
    }

    pub fn column(&self, label: u32) -> Result<usize> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::InvalidLabel {
                label,
                detail: format!("not a label of task {}", self.task),
            })
    }

    /// Label with the highest logit for each row (ties: first column).
    pub fn predict(&self, reps: &Tensor2) -> Result<Vec<u32>> {
        let logits = reps.matmul(&self.weight)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] + self.bias.get(0, c) > row[best] + self.bias.get(0, best) {
                        best = c;
                    }
                }
                self.labels[best]
            })
            .collect())
    }
}

/// Mean softmax cross-entropy of `reps · weight + bias` against task-local
/// label columns.
pub fn ce_head_loss(
    tape: &mut Tape,
    reps: Var,
    labels: &[u32],
    head: &CeHead,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let b = tape.value(reps).rows();
    if b != labels.len() || b == 0 {
        return Err(Error::dim(
            "ce_head_loss",
            format!("{b} rows, {} labels", labels.len()),
        ));
    }
    let c = head.labels.len();
    let mut targets = Tensor2::zeros(b, c);
    for (r, &l) in labels.iter().enumerate() {
        targets.set(r, head.column(l)?, -1.0 / b as f64);
    }
    let logits = tape.matmul(reps, weight)?;
    let logits = tape.add_bias(logits, bias)?;
    let log_probs = tape.log_softmax_masked(logits, vec![true; b * c])?;
    let weighted = tape.mul_const(log_probs, targets)?;
    Ok(tape.sum(weighted))
}
