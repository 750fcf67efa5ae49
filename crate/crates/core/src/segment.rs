//! Trajectory segments and preference records: the units that flow between
//! rollouts, labelers and the reward model.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionSpace, Frame, Observation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u64);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seg-{:08}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub u64);

/// A fixed-length run of (observation, action) pairs from one environment.
#[derive(Debug, Clone)]
pub struct TrajectorySegment {
    pub id: SegmentId,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    /// Per-step true rewards, kept for the synthetic oracle and evaluation.
    pub true_rewards: Option<Vec<f64>>,
    pub policy_version: u64,
    /// Global environment step at which the segment starts.
    pub env_step: u64,
    pub frames: Vec<Frame>,
    /// Reward-model input rows: observation followed by the action encoding.
    features: Array2<f64>,
}

impl TrajectorySegment {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: SegmentId,
        observations: Vec<Observation>,
        actions: Vec<Action>,
        true_rewards: Option<Vec<f64>>,
        policy_version: u64,
        env_step: u64,
        frames: Vec<Frame>,
        space: &ActionSpace,
    ) -> Result<Self> {
        if observations.is_empty() || observations.len() != actions.len() {
            return Err(Error::integrity(format!(
                "segment {id} has {} observations and {} actions",
                observations.len(),
                actions.len()
            )));
        }
        if let Some(r) = &true_rewards {
            if r.len() != observations.len() {
                return Err(Error::integrity(format!("segment {id} reward count mismatch")));
            }
        }
        let features = feature_rows(&observations, &actions, space)?;
        Ok(Self {
            id,
            observations,
            actions,
            true_rewards,
            policy_version,
            env_step,
            frames,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Sum of true rewards, optionally clipping each step to `[-1, 1]` first.
    pub fn true_return(&self, clip: bool) -> Result<f64> {
        let rewards = self
            .true_rewards
            .as_ref()
            .ok_or_else(|| Error::integrity(format!("segment {} carries no true rewards", self.id)))?;
        Ok(rewards.iter().map(|&r| if clip { r.clamp(-1.0, 1.0) } else { r }).sum())
    }
}

pub(crate) fn feature_rows(observations: &[Observation], actions: &[Action], space: &ActionSpace) -> Result<Array2<f64>> {
    let obs_dim = observations[0].len();
    let width = obs_dim + space.feature_dim();
    let mut flat = Vec::with_capacity(width * observations.len());
    for (o, a) in observations.iter().zip(actions) {
        if o.len() != obs_dim {
            return Err(Error::integrity("ragged observations in segment"));
        }
        flat.extend_from_slice(o);
        space.validate(a)?;
        space.encode_into(a, &mut flat);
    }
    Ok(Array2::from_shape_vec((observations.len(), width), flat).expect("row widths checked"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    Human,
}

/// Preference distribution over {first segment, second segment}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mu(pub [f64; 2]);

impl Mu {
    pub const FIRST: Mu = Mu([1.0, 0.0]);
    pub const SECOND: Mu = Mu([0.0, 1.0]);
    pub const TIE: Mu = Mu([0.5, 0.5]);

    pub fn is_storable(&self) -> bool {
        *self == Mu::FIRST || *self == Mu::SECOND || *self == Mu::TIE
    }

    pub fn swapped(self) -> Mu {
        Mu([self.0[1], self.0[0]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub record_id: RecordId,
    pub seg1_id: SegmentId,
    pub seg2_id: SegmentId,
    pub mu: Mu,
    pub source: LabelSource,
    pub unix_ms: u64,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_storable() {
            return Err(Error::integrity(format!("record {:?} has unstorable mu {:?}", self.record_id, self.mu)));
        }
        if self.seg1_id == self.seg2_id {
            return Err(Error::integrity(format!("record {:?} compares a segment with itself", self.record_id)));
        }
        Ok(())
    }
}

/// Segments referenced by labels, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct SegmentStore {
    segments: HashMap<SegmentId, Arc<TrajectorySegment>>,
}

impl SegmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, segment: Arc<TrajectorySegment>) {
        self.segments.insert(segment.id, segment);
    }

    pub fn get(&self, id: SegmentId) -> Result<&Arc<TrajectorySegment>> {
        self.segments
            .get(&id)
            .ok_or_else(|| Error::integrity(format!("segment {id} not in the segment store")))
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.segments.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Drops segments not referenced by `keep`.
    pub fn retain(&mut self, keep: impl Fn(SegmentId) -> bool) {
        self.segments.retain(|id, _| keep(*id));
    }
}
