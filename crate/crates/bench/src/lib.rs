//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use prefrl_core::env::EnvId;
use prefrl_core::oracle::{oracle_label, OracleConfig};
use prefrl_core::orchestrator::config::default_policy;
use prefrl_core::policy::{ActorCritic, RewardSource, RolloutWorkers};
use prefrl_core::segment::{LabelSource, PreferenceRecord, RecordId, SegmentStore, TrajectorySegment};

/// `n` pendulum segments from an untrained policy.
pub fn pendulum_segments(n: usize, seed: u64) -> Vec<Arc<TrajectorySegment>> {
    let spec = EnvId::Pendulum.spec();
    let hyper = default_policy(EnvId::Pendulum);
    let learner = ActorCritic::new(&spec, hyper, seed).expect("valid defaults");
    let mut workers = RolloutWorkers::new(&spec, hyper.workers, spec.segment_length, false, seed).expect("valid workers");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let rollout = workers.collect(&learner, RewardSource::Unrewarded, spec.segment_length).expect("rollout");
        out.extend(rollout.segments.into_iter().map(Arc::new));
    }
    out.truncate(n);
    out
}

/// Oracle-labeled comparisons between consecutive segment pairs.
pub fn oracle_records(segments: &[Arc<TrajectorySegment>]) -> (Vec<PreferenceRecord>, SegmentStore) {
    let oracle = OracleConfig::for_env(EnvId::Pendulum);
    let mut store = SegmentStore::new();
    let mut records = Vec::new();
    for (i, pair) in segments.chunks_exact(2).enumerate() {
        store.insert(pair[0].clone());
        store.insert(pair[1].clone());
        records.push(PreferenceRecord {
            record_id: RecordId(i as u64),
            seg1_id: pair[0].id,
            seg2_id: pair[1].id,
            mu: oracle_label(&pair[0], &pair[1], &oracle).expect("oracle labels"),
            source: LabelSource::Oracle,
            unix_ms: 0,
        });
    }
    (records, store)
}
