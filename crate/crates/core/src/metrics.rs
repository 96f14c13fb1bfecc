//! Accuracy matrix bookkeeping, average accuracy and backward transfer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::encoder::EncoderState;
use crate::knn::{build_criterion, evaluate_with_criterion};
use crate::memory::MemoryBuffer;
use crate::{Error, Result};

/// `R[i][j]`: accuracy on task `j`'s test split of the model trained
/// through task `i`, for `j ≤ i`. Values are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl RMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            entries: (0..n).map(|i| vec![None; i + 1]).collect(),
        }
    }

    /// Builds a fully populated lower-triangular matrix from rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    i + 1
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                r.set(i, j, v)?;
            }
        }
        Ok(r)
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries
            .get(i)
            .and_then(|r| r.get(j))
            .copied()
            .flatten()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n() || j > i {
            return Err(Error::InvalidInput(format!(
                "R[{i}][{j}] outside the lower triangle of n={}",
                self.n()
            )));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("accuracy {v} outside [0, 1]")));
        }
        self.entries[i][j] = Some(v);
        Ok(())
    }

    pub fn filled(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .filter(|v| v.is_some())
            .count()
    }

    pub fn row_complete(&self, i: usize) -> bool {
        self.entries
            .get(i)
            .is_some_and(|r| r.iter().all(Option::is_some))
    }

    fn bottom_row(&self) -> Result<Vec<f64>> {
        let n = self.n();
        if n == 0 || !self.row_complete(n - 1) {
            return Err(Error::InvalidState(
                "final row of the accuracy matrix is incomplete".into(),
            ));
        }
        Ok(self.entries[n - 1]
            .iter()
            .map(|v| v.expect("complete row"))
            .collect())
    }

    /// Rows as plain vectors; unfilled entries are NaN.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
            .collect()
    }

    /// `after_task,task0,…` header, one line per row; cells above the
    /// diagonal or not yet evaluated are empty.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut out = String::from("after_task");
        for j in 0..n {
            let _ = write!(out, ",task{j}");
        }
        out.push('\n');
        for i in 0..n {
            let _ = write!(out, "{i}");
            for j in 0..n {
                out.push(',');
                if let Some(v) = self.get(i, j) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of the final row: `1/n Σ_i R[n][i]`.
pub fn acc(r: &RMatrix) -> Result<f64> {
    Ok(mean(&r.bottom_row()?))
}

/// `1/(n−1) Σ_{i<n} (R[n][i] − R[i][i])`. Not applicable for a single task.
pub fn bwt(r: &RMatrix) -> Result<f64> {
    let n = r.n();
    if n < 2 {
        return Err(Error::NotApplicable(format!(
            "backward transfer needs at least 2 tasks, got {n}"
        )));
    }
    let last = r.bottom_row()?;
    let mut total = 0.0;
    for (i, final_acc) in last.iter().enumerate().take(n - 1) {
        let diag = r
            .get(i, i)
            .ok_or_else(|| Error::InvalidState(format!("R[{i}][{i}] missing")))?;
        total += final_acc - diag;
    }
    Ok(total / (n - 1) as f64)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAccounting {
    /// Main-loop updates per task.
    pub steps: Vec<usize>,
    /// Replay updates per task.
    pub replay_steps: Vec<usize>,
    pub total_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub order: String,
    pub n_tasks: usize,
    pub acc: f64,
    /// `None` when fewer than two tasks were trained.
    pub bwt: Option<f64>,
    pub final_accuracies: Vec<f64>,
    pub rmatrix: RMatrix,
    pub steps: StepAccounting,
}

impl MetricsReport {
    pub fn from_rmatrix(
        rmatrix: RMatrix,
        mode: &str,
        seed: u64,
        config_hash: &str,
        order: &str,
        steps: StepAccounting,
    ) -> Result<Self> {
        let acc = acc(&rmatrix)?;
        let bwt = match bwt(&rmatrix) {
            Ok(v) => Some(v),
            Err(Error::NotApplicable(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mode: mode.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            order: order.to_string(),
            n_tasks: rmatrix.n(),
            acc,
            bwt,
            final_accuracies: rmatrix.bottom_row()?,
            rmatrix,
            steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub acc: f64,
    pub per_task: Vec<f64>,
    /// `k` exceeded at least one task's exemplar count.
    pub clamped: bool,
}

/// Re-evaluates every task under each `k` with a fixed encoder and buffer.
pub fn knn_sweep(
    encoder: &EncoderState,
    buffer: &MemoryBuffer,
    tasks: &[TaskSpec],
    k_values: &[usize],
    t: f64,
) -> Result<Vec<SweepRow>> {
    let criteria = tasks
        .iter()
        .map(|task| build_criterion(buffer, task.task_id, encoder))
        .collect::<Result<Vec<_>>>()?;
    k_values
        .iter()
        .map(|&k| {
            let per_task = tasks
                .iter()
                .zip(&criteria)
                .map(|(task, c)| evaluate_with_criterion(c, task, encoder, k, t))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                k,
                acc: mean(&per_task),
                per_task,
                clamped: criteria.iter().any(|c| k > c.len()),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,acc,clamped\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.k, r.acc, r.clamped);
    }
    out
}
