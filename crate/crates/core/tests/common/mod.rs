//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sccl::data::Input;
use sccl::diffcore::Tensor2;
use sccl::encoder::{EncoderState, HashingConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    unit((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn rows_of(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor2 {
    Tensor2::from_rows(rows).unwrap()
}

/// Supervised contrastive loss written straight from its definition.
pub fn supcon(h: &[Vec<f64>], labels: &[u32], kappa: f64) -> f64 {
    let b = h.len();
    let mut total = 0.0;
    for j in 0..b {
        let positives: Vec<usize> = (0..b)
            .filter(|&u| u != j && labels[u] == labels[j])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..b)
            .filter(|&a| a != j)
            .map(|a| (dot(&h[j], &h[a]) / kappa).exp())
            .sum();
        let s: f64 = positives
            .iter()
            .map(|&p| ((dot(&h[j], &h[p]) / kappa).exp() / denom).ln())
            .sum();
        total += -s / positives.len() as f64;
    }
    total
}

/// Off-diagonal similarity distribution, full B × B with zero diagonal.
pub fn relation(h: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let b = h.len();
    (0..b)
        .map(|j| {
            let denom: f64 = (0..b)
                .filter(|&a| a != j)
                .map(|a| (dot(&h[j], &h[a]) / tau).exp())
                .sum();
            (0..b)
                .map(|p| {
                    if p == j {
                        0.0
                    } else {
                        (dot(&h[j], &h[p]) / tau).exp() / denom
                    }
                })
                .collect()
        })
        .collect()
}

pub fn ird(prev: &[Vec<f64>], cur: &[Vec<f64>], tau: f64) -> f64 {
    let b = prev.len();
    let sp = relation(prev, tau);
    let sc = relation(cur, tau);
    let mut total = 0.0;
    for j in 0..b {
        for p in 0..b {
            if p != j {
                total += sp[j][p] * sc[j][p].ln();
            }
        }
    }
    -total / (b * b) as f64
}

/// Exhaustive kNN: scores every exemplar, sorts by (similarity desc, id asc),
/// votes with unstabilized `exp(sim / t)`.
pub struct KnnOracle {
    pub label: u32,
    pub neighbor_ids: Vec<u64>,
    pub probs: Vec<(u32, f64)>,
}

pub fn knn(
    query: &[f64],
    reps: &[Vec<f64>],
    labels: &[u32],
    ids: &[u64],
    k: usize,
    t: f64,
) -> KnnOracle {
    let mut all: Vec<(f64, u64, u32)> = reps
        .iter()
        .zip(labels)
        .zip(ids)
        .map(|((r, &l), &id)| (dot(query, r), id, l))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k.min(all.len()));
    let mut votes: Vec<(u32, f64)> = Vec::new();
    for &(s, _, l) in &all {
        match votes.iter_mut().find(|(vl, _)| *vl == l) {
            Some((_, w)) => *w += (s / t).exp(),
            None => votes.push((l, (s / t).exp())),
        }
    }
    let z: f64 = votes.iter().map(|v| v.1).sum();
    votes.sort_by_key(|v| v.0);
    let probs: Vec<(u32, f64)> = votes.iter().map(|&(l, w)| (l, w / z)).collect();
    let mut best = probs[0];
    for &p in &probs[1..] {
        if p.1 > best.1 {
            best = p;
        }
    }
    KnnOracle {
        label: best.0,
        neighbor_ids: all.iter().map(|a| a.1).collect(),
        probs,
    }
}

pub fn acc(rows: &[Vec<f64>]) -> f64 {
    let last = rows.last().unwrap();
    last.iter().sum::<f64>() / last.len() as f64
}

pub fn bwt(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let last = &rows[n - 1];
    (0..n - 1).map(|i| last[i] - rows[i][i]).sum::<f64>() / (n - 1) as f64
}

/// Small encoder over dense raw features for gradient checks.
pub fn small_encoder(seed: u64, dim: usize, widths: &[usize]) -> EncoderState {
    let hashing = HashingConfig {
        dim,
        ..HashingConfig::default()
    };
    EncoderState::new(hashing, widths, seed).unwrap()
}

pub fn raw_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Input> {
    (0..n)
        .map(|_| Input::RawFeatures((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

/// Labels over `n` slots, each label used at least twice when n ≥ 2.
pub fn paired_labels(rng: &mut ChaCha8Rng, n: usize, n_labels: u32) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i / 2) as u32 % n_labels).collect();
    if n % 2 == 1 && n > 1 {
        labels[n - 1] = labels[n - 2];
    }
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}
