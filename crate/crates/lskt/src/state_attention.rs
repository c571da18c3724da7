//! Learning-state pool, clustering, and the two-branch sparse attention.
//!
//! A bounded FIFO pool keeps recent learners' (detached) learning-state
//! sequences. k-means over the pooled timesteps yields cluster centers;
//! each position of the current sequence is labeled by its nearest center,
//! and the state-similarity attention branch is restricted to history
//! positions sharing the label. The exercise-similarity branch is plain
//! causal attention. Both branches are softmax-normalized independently
//! and summed, so a full attention row carries mass 2.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Sentinel label for padded positions.
pub const UNASSIGNED: usize = usize::MAX;

/// Fixed Lloyd-iteration budget for every k-means fit.
pub const LLOYD_ITERATIONS: usize = 10;

/// Bounded FIFO of learning-state sequences from recent batches. Entries
/// are plain values with no gradient history.
#[derive(Debug, Clone)]
pub struct StatePool {
    entries: VecDeque<Tensor>,
    capacity: usize,
}

impl StatePool {
    pub fn new(capacity: usize) -> Self {
        StatePool { entries: VecDeque::new(), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total pooled state vectors (timesteps across all entries).
    pub fn total_points(&self) -> usize {
        self.entries.iter().map(Tensor::rows).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    /// Appends one batch of sequences, evicting the oldest entries beyond
    /// capacity. Call strictly after the batch's attention has been
    /// computed, so a batch never feeds its own clustering.
    pub fn update(&mut self, batch_states: Vec<Tensor>) {
        for states in batch_states {
            self.entries.push_back(states);
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
    }

    /// Rebuilds a pool from serialized entries, oldest first.
    pub fn from_entries(capacity: usize, entries: Vec<Tensor>) -> Self {
        let mut pool = StatePool::new(capacity);
        pool.update(entries);
        pool
    }
}

/// Fitted (or cold) cluster centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub n: usize,
    pub fitted: bool,
}

impl ClusterModel {
    /// Placeholder used until the pool is warm; every position then shares
    /// one label and the sparse mask is a no-op.
    pub fn unfitted(n: usize) -> Self {
        ClusterModel { centers: Vec::new(), n, fitted: false }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm over every pooled timestep, a fixed number of
/// iterations, centers seeded from `n` distinct pooled points. An empty
/// cluster is reseeded to the point farthest from that cluster's previous
/// center. Returns an unfitted model while the pool holds fewer than `n*5`
/// points.
pub fn kmeans_fit(
    pool: &StatePool,
    n: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel> {
    if n == 0 {
        return Err(Error::Contract("cluster count must be at least 1".into()));
    }
    let points: Vec<&[f64]> = pool
        .entries()
        .flat_map(|t| t.data().chunks(t.cols()))
        .collect();
    if points.len() < n * 5 {
        return Ok(ClusterModel::unfitted(n));
    }

    let mut seed_indices: Vec<usize> = Vec::with_capacity(n);
    while seed_indices.len() < n {
        let candidate = rng.gen_range(0..points.len());
        if !seed_indices.contains(&candidate) {
            seed_indices.push(candidate);
        }
    }
    let mut centers: Vec<Vec<f64>> =
        seed_indices.into_iter().map(|i| points[i].to_vec()).collect();

    let dim = centers[0].len();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..iterations {
        for (a, p) in assignment.iter_mut().zip(&points) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *a = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let mut count = 0usize;
            let mut sum = vec![0.0; dim];
            for (p, &a) in points.iter().zip(&assignment) {
                if a == c {
                    count += 1;
                    for (s, v) in sum.iter_mut().zip(*p) {
                        *s += v;
                    }
                }
            }
            if count == 0 {
                let farthest = points
                    .iter()
                    .enumerate()
                    .max_by(|(_, p), (_, q)| {
                        squared_distance(p, center)
                            .partial_cmp(&squared_distance(q, center))
                            .expect("finite distances")
                    })
                    .map(|(i, _)| i)
                    .expect("nonempty points");
                *center = points[farthest].to_vec();
            } else {
                for (slot, s) in center.iter_mut().zip(sum) {
                    *slot = s / count as f64;
                }
            }
        }
    }
    Ok(ClusterModel { centers, n, fitted: true })
}

/// Nearest-center label per position (ties to the lowest center index);
/// positions with `valid[t] = false` get [`UNASSIGNED`].
pub fn assign_labels(
    states: &Tensor,
    model: &ClusterModel,
    valid: &[bool],
) -> Result<Vec<usize>> {
    if !model.fitted {
        return Err(Error::Contract(
            "label assignment requires a fitted cluster model".into(),
        ));
    }
    if valid.len() != states.rows() {
        return Err(Error::Contract(format!(
            "valid mask length {} does not match {} state rows",
            valid.len(),
            states.rows()
        )));
    }
    let cols = states.cols();
    Ok(states
        .data()
        .chunks(cols)
        .zip(valid)
        .map(|(row, &ok)| {
            if !ok {
                return UNASSIGNED;
            }
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in model.centers.iter().enumerate() {
                let d = squared_distance(row, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Row-major `[len, len]` keep-mask allowing every `tau <= t`.
pub fn causal_keep_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for t in 0..len {
        for tau in 0..=t {
            mask[t * len + tau] = true;
        }
    }
    mask
}

/// Causal keep-mask additionally requiring equal cluster labels. The
/// diagonal is always kept: a state trivially shares its own label.
pub fn cluster_causal_mask(labels: &[usize]) -> Vec<bool> {
    let len = labels.len();
    let mut mask = vec![false; len * len];
    for t in 0..len {
        for tau in 0..=t {
            mask[t * len + tau] = tau == t || labels[tau] == labels[t];
        }
    }
    mask
}

/// Scaled dot-product similarity of each state pair:
/// `beta[t,tau] = (yhat_t . yhat_tau) / sqrt(D)`.
pub fn state_similarity(tape: &mut Tape, states: NodeId) -> Result<NodeId> {
    let dim = tape.value(states).cols();
    let states_t = tape.transpose(states)?;
    let prod = tape.matmul(states, states_t)?;
    Ok(tape.scale(prod, 1.0 / (dim as f64).sqrt()))
}

/// Causal softmax attention over exercise features alone (unit row mass).
pub fn exercise_attention(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let len = tape.value(x).rows();
    let scores = state_similarity(tape, x)?;
    tape.masked_softmax(scores, &causal_keep_mask(len))
}

/// The two normalized branches and their sum.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParts {
    pub exercise: NodeId,
    pub state: NodeId,
    pub combined: NodeId,
}

/// Two-branch attention: the causal exercise softmax plus the
/// cluster-masked state softmax. Combined rows sum to 2 for every valid
/// position; entries above the diagonal are exactly 0.
pub fn combined_attention(
    tape: &mut Tape,
    x: NodeId,
    state_scores: NodeId,
    labels: &[usize],
) -> Result<AttentionParts> {
    let len = tape.value(x).rows();
    if labels.len() != len {
        return Err(Error::Contract(format!(
            "label count {} does not match sequence length {len}",
            labels.len()
        )));
    }
    let exercise = exercise_attention(tape, x)?;
    let state = tape.masked_softmax(state_scores, &cluster_causal_mask(labels))?;
    let combined = tape.add(exercise, state)?;
    Ok(AttentionParts { exercise, state, combined })
}

/// Attention-weighted sum of interaction features:
/// `h_t = sum_tau gamma[t,tau] * y_tau`.
pub fn knowledge_state(tape: &mut Tape, gamma: NodeId, y: NodeId) -> Result<NodeId> {
    tape.matmul(gamma, y)
}
