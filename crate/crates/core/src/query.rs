//! Choosing which clip pairs to send for labeling.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{preference_from_sums, RewardModel};
use crate::segment::{SegmentId, TrajectorySegment};

pub const DEFAULT_POOL_CAPACITY: usize = 512;
/// Candidates drawn per pair actually presented.
pub const OVERSAMPLING: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Variance,
    Random,
}

/// Ring buffer of recent segments that candidate pairs are drawn from.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    capacity: usize,
    segments: VecDeque<Arc<TrajectorySegment>>,
    rng: ChaCha8Rng,
}

impl CandidatePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity >= 2, "pool capacity must allow at least one pair");
        Self { capacity, segments: VecDeque::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Adds a segment, evicting the oldest when full.
    pub fn push(&mut self, segment: Arc<TrajectorySegment>) {
        if self.segments.len() == self.capacity {
            self.segments.pop_front();
        }
        self.segments.push_back(segment);
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ids(&self) -> Vec<SegmentId> {
        self.segments.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: SegmentId) -> Option<&Arc<TrajectorySegment>> {
        self.segments.iter().find(|s| s.id == id)
    }
}

/// Draws up to `m` distinct unordered pairs of distinct pool entries. Fewer
/// are returned only when the pool has fewer than `m` possible pairs.
pub fn sample_candidate_pairs(pool: &mut CandidatePool, m: usize) -> Result<Vec<(Arc<TrajectorySegment>, Arc<TrajectorySegment>)>> {
    let n = pool.segments.len();
    if n < 2 {
        return Err(Error::PoolUnderfull { have: n, need: 2 });
    }
    let total = n * (n - 1) / 2;
    let m = m.min(total);
    let indices: Vec<(usize, usize)> = if 2 * m >= total {
        let mut all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        all.shuffle(&mut pool.rng);
        all.truncate(m);
        all
    } else {
        let mut seen = HashSet::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let i = pool.rng.random_range(0..n);
            let j = pool.rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push((i, j));
            }
        }
        out
    };
    Ok(indices
        .into_iter()
        .map(|(i, j)| (pool.segments[i].clone(), pool.segments[j].clone()))
        .collect())
}

/// Population variance.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Variance across members of each member's preference probability.
pub fn ensemble_disagreement(model: &RewardModel, first: &TrajectorySegment, second: &TrajectorySegment) -> Result<f64> {
    let a = model.member_sums(first)?;
    let b = model.member_sums(second)?;
    let probs: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| preference_from_sums(x, y)).collect();
    Ok(population_variance(&probs))
}

#[derive(Debug, Clone)]
pub struct QueryPair {
    pub first: Arc<TrajectorySegment>,
    pub second: Arc<TrajectorySegment>,
    pub disagreement: f64,
    /// Environment step counter when the pair was selected.
    pub created_step: u64,
}

impl QueryPair {
    pub fn ids(&self) -> (SegmentId, SegmentId) {
        (self.first.id, self.second.id)
    }
}

/// Samples `OVERSAMPLING × count` candidates and keeps `count` of them, either
/// the most disputed (ties to earlier candidates) or the first drawn.
pub fn select_queries(
    model: &RewardModel,
    pool: &mut CandidatePool,
    count: usize,
    strategy: SelectionStrategy,
    created_step: u64,
) -> Result<Vec<QueryPair>> {
    let candidates = sample_candidate_pairs(pool, OVERSAMPLING * count)?;
    let mut scored = match strategy {
        SelectionStrategy::Random => candidates.into_iter().map(|(a, b)| (a, b, 0.0)).collect::<Vec<_>>(),
        SelectionStrategy::Variance => {
            let mut sums: HashMap<SegmentId, Vec<f64>> = HashMap::new();
            let mut scored = Vec::with_capacity(candidates.len());
            for (a, b) in candidates {
                for seg in [&a, &b] {
                    if !sums.contains_key(&seg.id) {
                        sums.insert(seg.id, model.member_sums(seg)?);
                    }
                }
                let probs: Vec<f64> = sums[&a.id]
                    .iter()
                    .zip(&sums[&b.id])
                    .map(|(&x, &y)| preference_from_sums(x, y))
                    .collect();
                scored.push((a, b, population_variance(&probs)));
            }
            // Stable sort keeps sampling order among equal scores.
            scored.sort_by(|x, y| y.2.total_cmp(&x.2));
            scored
        }
    };
    scored.truncate(count);
    Ok(scored
        .into_iter()
        .map(|(first, second, disagreement)| QueryPair { first, second, disagreement, created_step })
        .collect())
}
