//! Exemplar selection: per-label K-means, then cluster-size-proportional
//! sampling so the kept exemplars follow the label's representation density.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, TaskSpec};
use crate::diffcore::Tensor2;
use crate::encoder::EncoderState;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `K × d`.
    pub centroids: Tensor2,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting from the seeding.
    pub trace: Vec<f64>,
    /// Set when fewer points than requested clusters forced `K` down.
    pub clamped: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lower index) and the inertia.
fn assign(points: &Tensor2, centroids: &Tensor2) -> (Vec<usize>, Vec<f64>, f64) {
    let mut assignment = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let p = points.row(i);
        let (best, d) = (0..centroids.rows())
            .map(|c| (c, sq_dist(p, centroids.row(c))))
            .fold(
                (0, f64::INFINITY),
                |acc, x| if x.1 < acc.1 { x } else { acc },
            );
        assignment.push(best);
        dists.push(d);
    }
    let inertia = dists.iter().sum();
    (assignment, dists, inertia)
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && *w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

fn plus_plus_seeding(points: &Tensor2, k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = weighted_pick(&d2, rng).unwrap_or_else(|| {
            // every point coincides with a centre; fall back to an unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        });
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd's algorithm from k-means++ seeding. Stops when no centroid moves
/// by `tol` or more (Euclidean), or after `max_iter` updates. An empty
/// cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans(
    points: &Tensor2,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::InvalidInput("k-means on zero points".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k-means with K = 0".into()));
    }
    let clamped = n < k;
    if clamped {
        log::warn!("k-means: {n} points < K = {k}; clamping K");
    }
    let k = k.min(n);
    let d = points.cols();
    let mut rng = stream(seed, "kmeans", &[]);
    let mut centroids = plus_plus_seeding(points, k, &mut rng);
    let (mut assignment, mut dists, mut inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];

    for _ in 0..max_iter {
        let mut sums = Tensor2::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for s in sums.row_mut(c) {
                    *s *= inv;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken.push(far);
                sums.row_mut(c).copy_from_slice(points.row(far));
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(sums.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = sums;
        (assignment, dists, inertia) = assign(points, &centroids);
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignment,
        inertia,
        trace,
        clamped,
    })
}

/// Splits `total` across buckets proportionally to `sizes` by largest
/// remainder (ties to the lower bucket index).
pub fn proportional_allocation(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(n);
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| ((total * s) % n, i))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = total - alloc.iter().sum::<usize>();
    for &(_, i) in &rest {
        if missing == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            missing -= 1;
        }
    }
    alloc
}

/// Per-label exemplar quotas for a memory of `m` slots.
///
/// Each label gets `⌊m/|C|⌋`, the remainder going one apiece to labels in
/// descending train-count order (ties: ascending label id). A label with
/// fewer examples than its quota contributes all of them and the shortfall
/// is handed round-robin, in the same order, to labels with spare examples.
pub fn label_quotas(counts: &BTreeMap<u32, usize>, m: usize) -> BTreeMap<u32, usize> {
    let mut order: Vec<(u32, usize)> = counts.iter().map(|(&l, &n)| (l, n)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_labels = order.len();
    if n_labels == 0 {
        return BTreeMap::new();
    }
    let base = m / n_labels;
    let extra = m % n_labels;
    let mut quotas: BTreeMap<u32, usize> = BTreeMap::new();
    let mut shortfall = 0;
    for (rank, &(label, n)) in order.iter().enumerate() {
        let want = base + usize::from(rank < extra);
        quotas.insert(label, want.min(n));
        shortfall += want.saturating_sub(n);
    }
    while shortfall > 0 {
        let mut gave = false;
        for &(label, n) in &order {
            if shortfall == 0 {
                break;
            }
            let q = quotas.get_mut(&label).expect("every label has a quota");
            if *q < n {
                *q += 1;
                shortfall -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }
    quotas
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectConfig {
    pub m: usize,
    pub clusters_per_label: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl SelectConfig {
    pub fn new(m: usize, clusters_per_label: usize) -> Self {
        Self {
            m,
            clusters_per_label,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// Picks up to `m` exemplars from the task's train split, encoding each
/// label's examples with `encoder` and sampling uniformly inside K-means
/// clusters in proportion to cluster size. The result is ordered by label,
/// then example id.
pub fn select_samples(
    task: &TaskSpec,
    encoder: &EncoderState,
    cfg: &SelectConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    if cfg.clusters_per_label == 0 {
        return Err(Error::Config("clusters_per_label must be >= 1".into()));
    }
    let by_label = task.train_by_label();
    let counts: BTreeMap<u32, usize> = by_label.iter().map(|(&l, v)| (l, v.len())).collect();
    let quotas = label_quotas(&counts, cfg.m);

    let mut selected = Vec::new();
    for (label, examples) in &by_label {
        let quota = quotas[label];
        if quota == 0 {
            continue;
        }
        let mut picked: Vec<&Example> = if quota >= examples.len() {
            examples.clone()
        } else {
            let reps = encoder.encode_all(examples, 256)?;
            let km_seed = crate::rng::derive_seed(
                seed,
                "select-kmeans",
                &[u64::from(task.task_id), u64::from(*label)],
            );
            let km = kmeans(
                &reps,
                cfg.clusters_per_label,
                km_seed,
                cfg.max_iter,
                cfg.tol,
            )?;
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); km.k()];
            for (i, &c) in km.assignment.iter().enumerate() {
                members[c].push(i);
            }
            let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
            let alloc = proportional_allocation(&sizes, quota);
            let mut rng = stream(
                seed,
                "select-draw",
                &[u64::from(task.task_id), u64::from(*label)],
            );
            let mut out = Vec::with_capacity(quota);
            for (cluster, &take) in members.iter().zip(&alloc) {
                for j in rand::seq::index::sample(&mut rng, cluster.len(), take) {
                    out.push(examples[cluster[j]]);
                }
            }
            out
        };
        picked.sort_by_key(|e| e.id);
        selected.extend(picked.into_iter().cloned());
    }
    Ok(selected)
}
