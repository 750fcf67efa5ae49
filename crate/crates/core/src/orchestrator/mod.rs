//! Runs an experiment: rollouts and policy updates, query selection and
//! labeling, and reward fitting, wired together either on one thread in a
//! fixed order or as three threads talking over bounded channels.
//!
//! The three roles never share mutable state. Segments flow from rollouts to
//! the labeler, labeled records flow from the labeler to the fitter, and the
//! fitter publishes immutable reward-model snapshots back to the other two.

pub mod config;
pub mod schedule;
pub mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::feedback::{AnswerLine, LogTail, LogWriter, QueryLine};
use crate::metrics::{final_return, Losses, MetricsRecord, MetricsWriter, REPORT_WINDOW};
use crate::nn::save_checkpoint;
use crate::oracle::{oracle_label, OracleConfig};
use crate::policy::{A2cDiagnostics, ActorCritic, EpisodeStats, RewardSource, RolloutOutput, RolloutWorkers};
use crate::query::{select_queries, CandidatePool, SelectionStrategy};
use crate::reward::{FitDiagnostics, FitMode, RewardModel, RewardTrainer, TargetRecord};
use crate::segment::{LabelSource, PreferenceRecord, RecordId, SegmentStore, TrajectorySegment};

pub use config::{ExperimentConfig, Execution, FeedbackSource};
pub use schedule::{annealed_label_rate, LabelSchedule, ScheduleKind};
pub use store::{ingest_label, read_label_log, LabelBuffer, PreferenceDatabase, SegmentArchive};

/// Feature rows kept for refreshing normalisation after each fit.
const RECENT_ROWS: usize = 1000;
const HUMAN_POLL: Duration = Duration::from_millis(200);

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// A labeled comparison together with the segments it references.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub record: PreferenceRecord,
    pub first: Arc<TrajectorySegment>,
    pub second: Arc<TrajectorySegment>,
}

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn database(&self) -> PathBuf {
        self.root.join("database.log")
    }

    pub fn segments(&self) -> PathBuf {
        self.root.join("segments")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.ckpt")
    }

    pub fn value(&self) -> PathBuf {
        self.root.join("value.ckpt")
    }

    pub fn member(&self, i: usize) -> PathBuf {
        self.root.join(format!("member_{i}.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub labels: usize,
    pub queries_issued: usize,
    /// Mean true return over the last report window.
    pub final_return: Option<f64>,
    pub reward_version: u64,
    /// True-reward reads on the path into policy updates. Zero in learned-reward runs.
    pub policy_reward_reads: u64,
    /// Database size when the first policy update happened.
    pub labels_before_first_update: usize,
    pub metrics: Vec<MetricsRecord>,
}

// ---------------------------------------------------------------------------
// Rollout and policy updates

struct Rollout {
    learner: ActorCritic,
    workers: RolloutWorkers,
    steps_per_update: usize,
    total_steps: u64,
    metrics_interval: u64,
    next_metrics: u64,
    episodes: Vec<EpisodeStats>,
    last: Option<A2cDiagnostics>,
    metrics: Vec<MetricsRecord>,
    writer: MetricsWriter,
}

impl Rollout {
    fn new(config: &ExperimentConfig, spec: &EnvSpec, seed: u64, render: bool, writer: MetricsWriter) -> Result<Self> {
        let hyper = config.policy_hyper();
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let learner = ActorCritic::new(spec, hyper, seeder.random())?;
        let workers = RolloutWorkers::new(spec, hyper.workers, config.segment_length(), render, seeder.random())?;
        Ok(Self {
            learner,
            workers,
            steps_per_update: hyper.steps_per_update,
            total_steps: config.total_steps,
            metrics_interval: config.metrics_interval,
            next_metrics: config.metrics_interval,
            episodes: Vec::new(),
            last: None,
            metrics: Vec::new(),
            writer,
        })
    }

    fn steps(&self) -> u64 {
        self.workers.steps()
    }

    fn done(&self) -> bool {
        self.steps() >= self.total_steps
    }

    fn collect(&mut self, source: RewardSource<'_>) -> Result<RolloutOutput> {
        let out = self.workers.collect(&self.learner, source, self.steps_per_update)?;
        self.episodes.extend_from_slice(&out.episodes);
        Ok(out)
    }

    fn learn(&mut self, out: &mut RolloutOutput) -> Result<()> {
        self.last = Some(self.learner.learn(&mut out.batch)?);
        Ok(())
    }

    fn record_metrics(&mut self, labels: usize, reward: Option<(u64, Option<&FitDiagnostics>)>) -> Result<()> {
        while self.steps() >= self.next_metrics {
            let mean = |f: fn(&EpisodeStats) -> f64| {
                (!self.episodes.is_empty()).then(|| self.episodes.iter().map(f).sum::<f64>() / self.episodes.len() as f64)
            };
            let diag = self.last.unwrap_or_default();
            let record = MetricsRecord {
                step: self.next_metrics,
                mean_true_return: mean(|e| e.true_return),
                mean_predicted_return: if reward.is_some() { mean(|e| e.predicted_return) } else { None },
                entropy: diag.entropy,
                losses: Losses {
                    policy: diag.policy_loss,
                    value: diag.value_loss,
                    reward_train: reward.and_then(|(_, d)| d.map(|d| d.mean_train_loss())),
                    reward_validation: reward.and_then(|(_, d)| d.and_then(|d| d.mean_validation_loss())),
                },
                labels,
                reward_version: reward.map(|(v, _)| v).unwrap_or(0),
            };
            self.writer.write(&record)?;
            self.metrics.push(record);
            self.episodes.clear();
            self.next_metrics += self.metrics_interval;
        }
        Ok(())
    }

    fn save(&self, paths: &RunPaths) -> Result<()> {
        save_checkpoint(&paths.policy(), &self.learner.policy.net, &self.learner.policy.log_std)?;
        save_checkpoint(&paths.value(), &self.learner.value.net, &[])
    }

    /// Steps per worker needed before the candidate pool holds `segments` clips.
    fn bootstrap_steps(&self, segments: usize, k: usize) -> u64 {
        let per_worker = segments.div_ceil(self.workers.workers()) * k;
        let chunks = per_worker.div_ceil(self.steps_per_update);
        (chunks * self.steps_per_update * self.workers.workers()) as u64
    }
}

// ---------------------------------------------------------------------------
// Query selection and labeling

struct HumanBridge {
    queries: LogWriter,
    answers: LogTail,
    pending: HashMap<String, (Arc<TrajectorySegment>, Arc<TrajectorySegment>)>,
    fps: f64,
}

enum Labeler {
    Oracle(OracleConfig),
    Human(Box<HumanBridge>),
}

struct Labeling {
    pool: CandidatePool,
    strategy: SelectionStrategy,
    labeler: Labeler,
    schedule: LabelSchedule,
    online: bool,
    issued: usize,
    budget: usize,
    next_record: u64,
    next_pair: u64,
}

impl Labeling {
    fn new(config: &ExperimentConfig, spec: &EnvSpec, seed: u64, paths: Option<&RunPaths>) -> Result<Self> {
        let labeler = match config.feedback {
            FeedbackSource::Human => {
                let paths = paths.ok_or_else(|| Error::config("human feedback needs an output directory"))?;
                Labeler::Human(Box::new(HumanBridge {
                    queries: LogWriter::queries(&paths.root)?,
                    answers: LogTail::answers(&paths.root),
                    pending: HashMap::new(),
                    fps: spec.fps,
                }))
            }
            _ => Labeler::Oracle(config.oracle()),
        };
        Ok(Self {
            pool: CandidatePool::new(config.pool_capacity, seed),
            strategy: config.strategy(),
            labeler,
            schedule: config.label_schedule(),
            online: !config.no_online_queries,
            issued: 0,
            budget: config.label_budget,
            next_record: 0,
            next_pair: 0,
        })
    }

    fn observe(&mut self, segments: &[Arc<TrajectorySegment>]) {
        for s in segments {
            self.pool.push(s.clone());
        }
    }

    /// Selects up to `count` pairs and labels them (oracle) or posts them (human).
    fn request(&mut self, count: usize, model: &RewardModel, strategy: SelectionStrategy, step: u64) -> Result<Vec<Labeled>> {
        let count = count.min(self.budget - self.issued);
        if count == 0 {
            return Ok(Vec::new());
        }
        let pairs = match select_queries(model, &mut self.pool, count, strategy, step) {
            Ok(p) => p,
            Err(Error::PoolUnderfull { .. }) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        self.issued += pairs.len();
        let mut out = Vec::new();
        for pair in pairs {
            match &mut self.labeler {
                Labeler::Oracle(cfg) => {
                    let mu = oracle_label(&pair.first, &pair.second, cfg)?;
                    out.push(Labeled {
                        record: PreferenceRecord {
                            record_id: RecordId(self.next_record),
                            seg1_id: pair.first.id,
                            seg2_id: pair.second.id,
                            mu,
                            source: LabelSource::Oracle,
                            unix_ms: 0,
                        },
                        first: pair.first,
                        second: pair.second,
                    });
                    self.next_record += 1;
                }
                Labeler::Human(bridge) => {
                    let pair_id = format!("pair-{:06}", self.next_pair);
                    self.next_pair += 1;
                    bridge.queries.append(&QueryLine {
                        pair_id: pair_id.clone(),
                        seg1: pair.first.id,
                        seg2: pair.second.id,
                        fps: bridge.fps,
                        enqueued_ms: unix_ms(),
                        left: pair.first.frames.iter().map(|f| f.to_wire()).collect(),
                        right: pair.second.frames.iter().map(|f| f.to_wire()).collect(),
                    })?;
                    bridge.pending.insert(pair_id, (pair.first, pair.second));
                }
            }
        }
        Ok(out)
    }

    /// Requests whatever the annealing schedule says is due by `step`.
    fn request_due(&mut self, step: u64, model: &RewardModel) -> Result<Vec<Labeled>> {
        if !self.online {
            return Ok(Vec::new());
        }
        let due = self.schedule.labels_due(step as f64).min(self.budget);
        self.request(due.saturating_sub(self.issued), model, self.strategy, step)
    }

    /// Answers that have arrived from human labelers. "Can't tell" is dropped here.
    fn poll_answers(&mut self) -> Result<Vec<Labeled>> {
        let Labeler::Human(bridge) = &mut self.labeler else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        for answer in bridge.answers.poll::<AnswerLine>()? {
            let Some((first, second)) = bridge.pending.remove(&answer.pair_id) else { continue };
            let Some(mu) = answer.choice.mu() else { continue };
            out.push(Labeled {
                record: PreferenceRecord {
                    record_id: RecordId(self.next_record),
                    seg1_id: first.id,
                    seg2_id: second.id,
                    mu,
                    source: LabelSource::Human,
                    unix_ms: answer.unix_ms,
                },
                first,
                second,
            });
            self.next_record += 1;
        }
        Ok(out)
    }

    fn is_human(&self) -> bool {
        matches!(self.labeler, Labeler::Human(_))
    }
}

// ---------------------------------------------------------------------------
// Reward fitting

struct Fitting {
    trainer: RewardTrainer,
    store: SegmentStore,
    buffer: LabelBuffer,
    database: PreferenceDatabase,
    archive: Option<SegmentArchive>,
    clip: bool,
    recent: std::collections::VecDeque<Vec<f64>>,
    feature_dim: usize,
    last: Option<FitDiagnostics>,
    labels_per_step: f64,
}

impl Fitting {
    fn new(config: &ExperimentConfig, spec: &EnvSpec, seed: u64, paths: Option<&RunPaths>) -> Result<Self> {
        let (database, archive) = match paths {
            Some(p) => (PreferenceDatabase::open(&p.database())?, Some(SegmentArchive::create(&p.segments())?)),
            None => (PreferenceDatabase::in_memory(), None),
        };
        Ok(Self {
            trainer: RewardTrainer::new(spec.feature_dim(), config.reward_config(), seed)?,
            store: SegmentStore::new(),
            buffer: LabelBuffer::new(config.label_buffer),
            database,
            archive,
            clip: config.oracle().clip_rewards,
            recent: std::collections::VecDeque::with_capacity(RECENT_ROWS),
            feature_dim: spec.feature_dim(),
            last: None,
            labels_per_step: config.fit_labels_per_step,
        })
    }

    fn ingest(&mut self, labeled: Labeled) -> Result<()> {
        for seg in [&labeled.first, &labeled.second] {
            if !self.store.contains(seg.id) {
                if let Some(a) = &self.archive {
                    a.save(seg)?;
                }
                self.store.insert(seg.clone());
            }
        }
        let mut record = labeled.record;
        if record.unix_ms == 0 {
            record.unix_ms = unix_ms();
        }
        ingest_label(&mut self.database, &mut self.buffer, &self.store, record)
    }

    fn recent_matrix(&self) -> Array2<f64> {
        let flat: Vec<f64> = self.recent.iter().flatten().copied().collect();
        Array2::from_shape_vec((self.recent.len(), self.feature_dim), flat).expect("fixed width")
    }

    /// Folds fresh on-policy features into the normalisation statistics.
    fn observe(&mut self, segments: &[Arc<TrajectorySegment>]) -> Result<()> {
        if segments.is_empty() {
            return Ok(());
        }
        let rows: usize = segments.iter().map(|s| s.len()).sum();
        let mut flat = Vec::with_capacity(rows * self.feature_dim);
        for s in segments {
            for row in s.features().rows() {
                flat.extend(row.iter().copied());
                if self.recent.len() == RECENT_ROWS {
                    self.recent.pop_front();
                }
                self.recent.push_back(row.to_vec());
            }
        }
        let features = Array2::from_shape_vec((rows, self.feature_dim), flat).expect("fixed width");
        self.trainer.refresh_normalization(features.view())
    }

    fn target_records(&self) -> Result<Vec<TargetRecord>> {
        let mut out = Vec::with_capacity(2 * self.buffer.len());
        for r in self.buffer.iter() {
            for (slot, id) in [(0, r.seg1_id), (1, r.seg2_id)] {
                out.push(TargetRecord {
                    record_id: RecordId(2 * r.record_id.0 + slot),
                    segment_id: id,
                    target: self.store.get(id)?.true_return(self.clip)?,
                });
            }
        }
        Ok(out)
    }

    fn fit_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let recent = self.recent_matrix();
        for _ in 0..epochs {
            let diag = match self.trainer.config.mode {
                FitMode::Preferences => {
                    let records = self.buffer.contents().to_vec();
                    self.trainer.fit_epoch(&records, &self.store, recent.view())?
                }
                FitMode::TargetRegression => {
                    let targets = self.target_records()?;
                    self.trainer.fit_target_regression(&targets, &self.store, recent.view())?
                }
            };
            self.last = Some(diag);
        }
        let keep = self.buffer.referenced_segments();
        self.store.retain(|id| keep.contains(&id));
        Ok(())
    }

    /// Steady-state cadence: a fixed number of labels passes through the
    /// fitter per environment step.
    fn fit_for_steps(&mut self, steps: usize) -> Result<()> {
        let passes = self.buffer.advance(steps as f64 * self.labels_per_step);
        self.fit_epochs(passes)
    }

    fn save(&self, paths: &RunPaths) -> Result<()> {
        for (i, m) in self.trainer.model().members.iter().enumerate() {
            let norm = [m.norm.mean, m.norm.var, if m.norm.initialized { 1.0 } else { 0.0 }];
            save_checkpoint(&paths.member(i), &m.net, &norm)?;
        }
        Ok(())
    }
}

/// Runs `epochs` passes over the labels collected so far, before any policy
/// update.
pub fn pretrain_reward_model(
    trainer: &mut RewardTrainer,
    records: &[PreferenceRecord],
    segments: &SegmentStore,
    epochs: usize,
) -> Result<Option<FitDiagnostics>> {
    if records.is_empty() {
        return Err(Error::config("reward pretraining needs at least one label"));
    }
    let mut last = None;
    for _ in 0..epochs {
        last = Some(trainer.fit_epoch(records, segments, Array2::zeros((0, 0)).view())?);
    }
    Ok(last)
}

/// Agreement between stored labels and the synthetic oracle on the same pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub agree: usize,
    pub disagree: usize,
    /// Records whose stored label or oracle label is a tie but not both.
    pub tie_mismatch: usize,
}

impl ReplayReport {
    pub fn agreement(&self) -> Option<f64> {
        (self.records > 0).then(|| self.agree as f64 / self.records as f64)
    }
}

/// Re-labels every record in a run directory's label log with the oracle,
/// using the archived segments and the run's own oracle settings.
pub fn oracle_replay(run_dir: &Path) -> Result<ReplayReport> {
    let paths = RunPaths { root: run_dir.to_path_buf() };
    let config = ExperimentConfig::from_path(&paths.config(), &[])?;
    let space = config.env.spec().action_space;
    let archive = SegmentArchive::create(&paths.segments())?;
    let oracle = config.oracle();
    let mut report = ReplayReport::default();
    for record in read_label_log(&paths.database())? {
        let first = archive.load(record.seg1_id, &space)?;
        let second = archive.load(record.seg2_id, &space)?;
        let replayed = oracle_label(&first, &second, &oracle)?;
        report.records += 1;
        if replayed == record.mu {
            report.agree += 1;
        } else if replayed == crate::segment::Mu::TIE || record.mu == crate::segment::Mu::TIE {
            report.tie_mismatch += 1;
        } else {
            report.disagree += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Drivers

fn derive_seeds(seed: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.random(), rng.random(), rng.random()]
}

fn to_arcs(out: &mut RolloutOutput) -> Vec<Arc<TrajectorySegment>> {
    std::mem::take(&mut out.segments).into_iter().map(Arc::new).collect()
}

/// Number of clips gathered from the untrained policy before the first queries.
fn bootstrap_segments(config: &ExperimentConfig) -> usize {
    (2 * config.initial_labels()).clamp(2, config.pool_capacity)
}

fn prepare(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<(EnvSpec, Option<RunPaths>, MetricsWriter)> {
    let spec = config.env.spec();
    let paths = out_dir.map(RunPaths::new).transpose()?;
    let writer = match &paths {
        Some(p) => {
            std::fs::write(p.config(), config.to_toml())?;
            MetricsWriter::create(&p.metrics())?
        }
        None => MetricsWriter::sink(),
    };
    Ok((spec, paths, writer))
}

/// Runs a full experiment. With `out_dir`, metrics, the label log, labeled
/// segments and final checkpoints are written there.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let config = config.clone().resolved()?;
    match config.execution {
        Execution::Sync => run_sync(&config, out_dir),
        Execution::Threaded => run_threaded(&config, out_dir),
    }
}

fn run_sync(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    let (spec, paths, writer) = prepare(config, out_dir)?;
    let [s_roll, s_label, s_fit] = derive_seeds(config.seed);
    let human = config.feedback == FeedbackSource::Human;
    let mut rollout = Rollout::new(config, &spec, s_roll, human, writer)?;

    if !config.uses_labels() {
        while !rollout.done() {
            let mut out = rollout.collect(RewardSource::True)?;
            rollout.learn(&mut out)?;
            rollout.record_metrics(0, None)?;
        }
        if let Some(p) = &paths {
            rollout.save(p)?;
        }
        return Ok(RunSummary {
            steps: rollout.steps(),
            labels: 0,
            queries_issued: 0,
            final_return: final_return(&rollout.metrics, REPORT_WINDOW),
            reward_version: 0,
            policy_reward_reads: rollout.workers.audits.policy.reads,
            labels_before_first_update: 0,
            metrics: rollout.metrics,
        });
    }

    let mut labeling = Labeling::new(config, &spec, s_label, paths.as_ref())?;
    let mut fitting = Fitting::new(config, &spec, s_fit, paths.as_ref())?;

    // Clips from the untrained policy for the initial comparisons.
    let bootstrap = rollout.bootstrap_steps(bootstrap_segments(config), config.segment_length());
    while rollout.steps() < bootstrap.min(config.total_steps) {
        let mut out = rollout.collect(RewardSource::Unrewarded)?;
        let segs = to_arcs(&mut out);
        labeling.observe(&segs);
        fitting.observe(&segs)?;
        rollout.record_metrics(fitting.database.len(), Some((fitting.trainer.version(), None)))?;
    }
    let initial = labeling.request(config.initial_labels(), fitting.trainer.model(), SelectionStrategy::Random, rollout.steps())?;
    for l in initial {
        fitting.ingest(l)?;
    }
    if labeling.is_human() {
        while fitting.database.is_empty() {
            std::thread::sleep(HUMAN_POLL);
            for l in labeling.poll_answers()? {
                fitting.ingest(l)?;
            }
        }
    }
    if fitting.buffer.is_empty() {
        return Err(Error::config("no initial labels could be collected"));
    }
    fitting.fit_epochs(config.pretrain_epochs().max(1))?;
    let labels_before_first_update = fitting.database.len();

    while !rollout.done() {
        let mut out = rollout.collect(RewardSource::Learned(fitting.trainer.model()))?;
        rollout.learn(&mut out)?;
        let segs = to_arcs(&mut out);
        labeling.observe(&segs);
        fitting.observe(&segs)?;
        let mut fresh = labeling.request_due(rollout.steps(), fitting.trainer.model())?;
        fresh.extend(labeling.poll_answers()?);
        for l in fresh {
            fitting.ingest(l)?;
        }
        fitting.fit_for_steps(out.batch.len())?;
        rollout.record_metrics(fitting.database.len(), Some((fitting.trainer.version(), fitting.last.as_ref())))?;
    }

    if let Some(p) = &paths {
        rollout.save(p)?;
        fitting.save(p)?;
    }
    Ok(RunSummary {
        steps: rollout.steps(),
        labels: fitting.database.len(),
        queries_issued: labeling.issued,
        final_return: final_return(&rollout.metrics, REPORT_WINDOW),
        reward_version: fitting.trainer.version(),
        policy_reward_reads: rollout.workers.audits.policy.reads,
        labels_before_first_update,
        metrics: rollout.metrics,
    })
}

// ---------------------------------------------------------------------------
// Threaded mode

struct SegmentBatch {
    step: u64,
    segments: Vec<Arc<TrajectorySegment>>,
}

enum FitMessage {
    Observe(Vec<Arc<TrajectorySegment>>),
    Label(Box<Labeled>),
    /// Initial comparisons have all been requested.
    InitialRequested,
}

#[derive(Clone)]
struct Snapshot {
    model: Arc<RewardModel>,
    diagnostics: Option<FitDiagnostics>,
    labels: usize,
}

/// Sends on a bounded channel, discarding the oldest queued item when full.
fn send_drop_oldest<T>(tx: &Sender<T>, rx: &Receiver<T>, mut item: T) -> bool {
    loop {
        match tx.try_send(item) {
            Ok(()) => return true,
            Err(TrySendError::Full(back)) => {
                let _ = rx.try_recv();
                item = back;
            }
            Err(TrySendError::Disconnected(_)) => return false,
        }
    }
}

fn joined<T>(r: std::thread::Result<Result<T>>) -> Result<T> {
    r.map_err(|_| Error::training("process panicked"))?
}

fn latest<T>(rx: &Receiver<T>) -> Option<T> {
    rx.try_iter().last()
}

fn run_threaded(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    if !config.uses_labels() {
        // Nothing to parallelise without a reward model.
        return run_sync(config, out_dir);
    }
    let (spec, paths, writer) = prepare(config, out_dir)?;
    let [s_roll, s_label, s_fit] = derive_seeds(config.seed);
    let human = config.feedback == FeedbackSource::Human;
    let mut rollout = Rollout::new(config, &spec, s_roll, human, writer)?;
    let mut labeling = Labeling::new(config, &spec, s_label, paths.as_ref())?;
    let mut fitting = Fitting::new(config, &spec, s_fit, paths.as_ref())?;

    let (seg_tx, seg_rx) = bounded::<SegmentBatch>(64);
    let seg_rx_drop = seg_rx.clone();
    let (fit_tx, fit_rx) = bounded::<FitMessage>(4096);
    let (snap_roll_tx, snap_roll_rx) = bounded::<Snapshot>(1);
    let snap_roll_drop = snap_roll_rx.clone();
    let (snap_label_tx, snap_label_rx) = bounded::<Snapshot>(1);
    let snap_label_drop = snap_label_rx.clone();

    let bootstrap = rollout.bootstrap_steps(bootstrap_segments(config), config.segment_length());
    let want_segments = bootstrap_segments(config);
    let initial_labels = config.initial_labels();
    let pretrain = config.pretrain_epochs().max(1);

    let rollout_handle = std::thread::spawn(move || -> Result<(Rollout, usize)> {
        while rollout.steps() < bootstrap.min(rollout.total_steps) {
            let mut out = rollout.collect(RewardSource::Unrewarded)?;
            let step = rollout.steps();
            if !send_drop_oldest(&seg_tx, &seg_rx_drop, SegmentBatch { step, segments: to_arcs(&mut out) }) {
                return Err(Error::training("labeling process stopped"));
            }
            rollout.record_metrics(0, Some((0, None)))?;
        }
        let mut snap = snap_roll_rx.recv().map_err(|_| Error::training("fitting process stopped before the first fit"))?;
        let labels_before = snap.labels;
        while !rollout.done() {
            if let Some(s) = latest(&snap_roll_rx) {
                snap = s;
            }
            let mut out = rollout.collect(RewardSource::Learned(snap.model.as_ref()))?;
            rollout.learn(&mut out)?;
            let step = rollout.steps();
            send_drop_oldest(&seg_tx, &seg_rx_drop, SegmentBatch { step, segments: to_arcs(&mut out) });
            rollout.record_metrics(snap.labels, Some((snap.model.version, snap.diagnostics.as_ref())))?;
        }
        Ok((rollout, labels_before))
    });

    let init_model = Arc::new(fitting.trainer.model().clone());
    let label_handle = std::thread::spawn(move || -> Result<Labeling> {
        let mut model = init_model;
        let mut initial_done = false;
        let mut announced = false;
        let mut last_step = 0;
        loop {
            let batch = match seg_rx.recv_timeout(HUMAN_POLL) {
                Ok(b) => Some(b),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            if let Some(s) = latest(&snap_label_rx) {
                model = s.model;
            }
            let mut fresh = Vec::new();
            if let Some(b) = batch {
                last_step = b.step;
                labeling.observe(&b.segments);
                if fit_tx.send(FitMessage::Observe(b.segments)).is_err() {
                    break;
                }
            }
            if !initial_done && labeling.pool.len() >= want_segments {
                fresh.extend(labeling.request(initial_labels, &model, SelectionStrategy::Random, last_step)?);
                initial_done = true;
            } else if initial_done {
                fresh.extend(labeling.request_due(last_step, &model)?);
            }
            fresh.extend(labeling.poll_answers()?);
            for l in fresh {
                if fit_tx.send(FitMessage::Label(Box::new(l))).is_err() {
                    return Ok(labeling);
                }
            }
            if initial_done && !announced {
                announced = fit_tx.send(FitMessage::InitialRequested).is_ok();
            }
        }
        Ok(labeling)
    });

    let fit_handle = std::thread::spawn(move || -> Result<Fitting> {
        let mut started = false;
        let mut initial_requested = false;
        let publish = |fitting: &Fitting| Snapshot {
            model: Arc::new(fitting.trainer.model().clone()),
            diagnostics: fitting.last.clone(),
            labels: fitting.database.len(),
        };
        loop {
            let first = if started {
                match fit_rx.try_recv() {
                    Ok(m) => Some(m),
                    Err(crossbeam_channel::TryRecvError::Empty) => None,
                    Err(crossbeam_channel::TryRecvError::Disconnected) => break,
                }
            } else {
                match fit_rx.recv_timeout(HUMAN_POLL) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            };
            for msg in first.into_iter().chain(fit_rx.try_iter()) {
                match msg {
                    FitMessage::Observe(segs) => fitting.observe(&segs)?,
                    FitMessage::Label(l) => fitting.ingest(*l)?,
                    FitMessage::InitialRequested => initial_requested = true,
                }
            }
            if !started {
                if initial_requested && !fitting.buffer.is_empty() {
                    fitting.fit_epochs(pretrain)?;
                    started = true;
                } else {
                    continue;
                }
            } else if !fitting.buffer.is_empty() {
                fitting.fit_epochs(1)?;
            }
            let snap = publish(&fitting);
            send_drop_oldest(&snap_roll_tx, &snap_roll_drop, snap.clone());
            send_drop_oldest(&snap_label_tx, &snap_label_drop, snap);
        }
        Ok(fitting)
    });

    let rollout_result = joined(rollout_handle.join());
    let labeling = joined(label_handle.join());
    let fitting = joined(fit_handle.join());
    let (rollout, labels_before_first_update) = rollout_result?;
    let labeling = labeling?;
    let fitting = fitting?;

    if let Some(p) = &paths {
        rollout.save(p)?;
        fitting.save(p)?;
    }
    Ok(RunSummary {
        steps: rollout.steps(),
        labels: fitting.database.len(),
        queries_issued: labeling.issued,
        final_return: final_return(&rollout.metrics, REPORT_WINDOW),
        reward_version: fitting.trainer.version(),
        policy_reward_reads: rollout.workers.audits.policy.reads,
        labels_before_first_update,
        metrics: rollout.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{Choice, LogTail, LogWriter};

    fn tiny(feedback: FeedbackSource) -> ExperimentConfig {
        ExperimentConfig {
            feedback,
            total_steps: 3_000,
            label_budget: 24,
            metrics_interval: 500,
            seed: 7,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn sync_run_spends_the_budget_without_reading_true_reward() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&tiny(FeedbackSource::Oracle), Some(dir.path())).unwrap();
        assert!(summary.steps >= 3_000);
        assert_eq!(summary.labels, 24);
        assert_eq!(summary.queries_issued, 24);
        assert_eq!(summary.policy_reward_reads, 0);
        assert!(summary.labels_before_first_update >= 1);
        assert_eq!(summary.metrics.len(), 6);
        for name in ["metrics.jsonl", "database.log", "config.toml", "policy.ckpt", "value.ckpt", "member_0.ckpt"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        assert_eq!(read_label_log(&dir.path().join("database.log")).unwrap().len(), 24);
    }

    #[test]
    fn oracle_run_replays_in_full_agreement() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(FeedbackSource::Oracle), Some(dir.path())).unwrap();
        let report = oracle_replay(dir.path()).unwrap();
        assert_eq!(report.records, 24);
        assert_eq!(report.agree, 24);
        assert_eq!(report.agreement(), Some(1.0));
    }

    #[test]
    fn same_seed_reproduces_a_sync_run() {
        let a = run_experiment(&tiny(FeedbackSource::Oracle), None).unwrap();
        let b = run_experiment(&tiny(FeedbackSource::Oracle), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_reads_true_reward_and_no_labels() {
        let summary = run_experiment(&tiny(FeedbackSource::TrueReward), None).unwrap();
        assert_eq!(summary.labels, 0);
        assert!(summary.policy_reward_reads > 0);
    }

    #[test]
    fn ablations_run_to_completion() {
        let variants: [fn(&mut ExperimentConfig); 5] = [
            |c| c.random_queries = true,
            |c| c.no_ensemble = true,
            |c| c.no_online_queries = true,
            |c| c.target_regression = true,
            |c| c.no_segments = true,
        ];
        for (i, set) in variants.iter().enumerate() {
            let mut config = tiny(FeedbackSource::Oracle);
            set(&mut config);
            let summary = run_experiment(&config, None).unwrap_or_else(|e| panic!("variant {i}: {e}"));
            assert_eq!(summary.policy_reward_reads, 0, "variant {i}");
            assert!(summary.labels > 0, "variant {i}");
        }
        let mut config = tiny(FeedbackSource::Oracle);
        config.no_online_queries = true;
        let summary = run_experiment(&config, None).unwrap();
        assert_eq!(summary.labels_before_first_update, summary.labels);
    }

    #[test]
    fn threaded_run_completes_and_labels() {
        let mut config = tiny(FeedbackSource::Oracle);
        config.execution = Execution::Threaded;
        let summary = run_experiment(&config, None).unwrap();
        assert!(summary.steps >= 3_000);
        assert!(summary.labels >= 1);
        assert!(summary.labels <= 24);
        assert_eq!(summary.policy_reward_reads, 0);
        assert!(summary.reward_version >= 1);
    }

    #[test]
    fn human_labels_arrive_through_the_answer_log() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut config = tiny(FeedbackSource::Human);
        config.total_steps = 1_500;
        config.label_budget = 8;
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let labeler = {
            let (root, stop) = (root.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut tail = LogTail::queries(&root);
                let mut answers = None;
                let mut n = 0;
                while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                    for q in tail.poll::<QueryLine>().unwrap_or_default() {
                        let w = answers.get_or_insert_with(|| LogWriter::answers(&root).unwrap());
                        let choice = if n % 3 == 2 { Choice::CantTell } else { Choice::Left };
                        w.append(&AnswerLine { pair_id: q.pair_id, choice, latency_ms: Some(900), unix_ms: 1 }).unwrap();
                        n += 1;
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
            })
        };
        let summary = run_experiment(&config, Some(&root)).unwrap();
        stop.store(true, std::sync::atomic::Ordering::Relaxed);
        labeler.join().unwrap();
        assert!(summary.labels >= 1);
        // Every third answer was "can't tell" and must not be stored.
        assert!(summary.labels < summary.queries_issued);
        let stored = read_label_log(&root.join("database.log")).unwrap();
        assert!(stored.iter().all(|r| r.source == LabelSource::Human && r.mu.0[0] == 1.0));
    }

    #[test]
    fn drop_oldest_keeps_the_newest_items() {
        let (tx, rx) = bounded(2);
        for i in 0..5 {
            assert!(send_drop_oldest(&tx, &rx, i));
        }
        assert_eq!(rx.try_iter().collect::<Vec<_>>(), vec![3, 4]);
    }
}
