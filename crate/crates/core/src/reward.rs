//! Ensemble reward model fit to pairwise preferences.
//!
//! Each member scores a segment by the sum of its per-step outputs. The
//! probability that the first segment is preferred is a logistic function of
//! the score difference, mixed with a 10% chance of a uniformly random answer:
//!
//! ```text
//! P̂[σ¹ ≻ σ²] = 0.9 · sigmoid(S¹ − S²) + 0.05
//! ```
//!
//! Members are trained on Poisson(1) bootstrap resamples of the label buffer;
//! records a member drew zero times (a fraction 1/e in expectation) form its
//! validation set. The predicted reward handed to the policy is the average of
//! independently normalised member outputs, rescaled to a target spread.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, LayerSpec, Mode, Net};
use crate::policy::RewardPredictor;
use crate::segment::{Mu, PreferenceRecord, RecordId, SegmentId, SegmentStore, TrajectorySegment};

/// Chance that a labeler answers uniformly at random.
pub const LABEL_ERROR_RATE: f64 = 0.1;
const NORM_FLOOR: f64 = 1e-6;
const L2_MIN: f64 = 1e-8;
const L2_MAX: f64 = 1e2;
/// Validation/training loss band the ℓ2 coefficient is steered into.
pub const VALIDATION_BAND: (f64, f64) = (1.1, 1.5);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Preference probability from two unnormalised segment scores.
///
/// Evaluated on the non-negative side of the score difference and mirrored,
/// so swapping the arguments gives exactly `1 - p` and the result never
/// leaves `[0.05, 0.95]` through rounding.
pub fn preference_from_sums(first: f64, second: f64) -> f64 {
    let upper = 1.0 - LABEL_ERROR_RATE / 2.0;
    let high = |d: f64| ((1.0 - LABEL_ERROR_RATE) * sigmoid(d) + LABEL_ERROR_RATE / 2.0).min(upper);
    let d = first - second;
    if d >= 0.0 {
        high(d)
    } else {
        1.0 - high(-d)
    }
}

/// Cross-entropy of one label against the predicted probability, plus
/// `d loss / d S¹` (the derivative with respect to `S²` is its negative).
fn preference_loss_terms(mu: [f64; 2], first: f64, second: f64) -> (f64, f64) {
    let s = sigmoid(first - second);
    let p = (1.0 - LABEL_ERROR_RATE) * s + LABEL_ERROR_RATE / 2.0;
    let loss = -(mu[0] * p.ln() + mu[1] * (1.0 - p).ln());
    let dp = (1.0 - LABEL_ERROR_RATE) * s * (1.0 - s);
    let dloss = -(mu[0] / p - mu[1] / (1.0 - p)) * dp;
    (loss, dloss)
}

/// Exponential moving statistics of one member's raw outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: f64,
    pub var: f64,
    pub initialized: bool,
}

impl Default for RunningNorm {
    fn default() -> Self {
        Self { mean: 0.0, var: 0.0, initialized: false }
    }
}

impl RunningNorm {
    /// Folds `samples` in one at a time with the given per-sample decay. The
    /// first batch seen initialises the statistics directly.
    pub fn update(&mut self, samples: &[f64], decay: f64) {
        if samples.is_empty() {
            return;
        }
        if !self.initialized {
            let n = samples.len() as f64;
            self.mean = samples.iter().sum::<f64>() / n;
            self.var = samples.iter().map(|x| (x - self.mean).powi(2)).sum::<f64>() / n;
            self.initialized = true;
            return;
        }
        for &x in samples {
            let delta = x - self.mean;
            self.mean += (1.0 - decay) * delta;
            self.var = decay * (self.var + (1.0 - decay) * delta * delta);
        }
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    /// Standardised value; a constant predictor maps to zero.
    pub fn normalize(&self, raw: f64) -> f64 {
        let std = self.std();
        if std < NORM_FLOOR {
            0.0
        } else {
            (raw - self.mean) / std
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemberPredictor {
    pub net: Net,
    pub norm: RunningNorm,
}

impl MemberPredictor {
    pub fn raw_outputs(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(features)?.remove_axis(Axis(1)))
    }

    /// Unnormalised, undiscounted sum of per-step outputs over a segment.
    pub fn segment_sum(&self, segment: &TrajectorySegment) -> Result<f64> {
        Ok(self.raw_outputs(segment.features().view())?.sum())
    }
}

/// Immutable prediction-side view of the ensemble. Published snapshots of this
/// type are what rollouts and query selection read.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub members: Vec<MemberPredictor>,
    pub target_std: f64,
    pub version: u64,
}

impl RewardModel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_fitted(&self) -> bool {
        !self.members.is_empty() && self.members.iter().all(|m| m.norm.initialized)
    }

    fn ensure_fitted(&self) -> Result<()> {
        if self.is_fitted() {
            Ok(())
        } else {
            Err(Error::contract("reward model has no fitted members with normalisation statistics"))
        }
    }

    /// Normalised ensemble reward for each feature row.
    pub fn predict_batch(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.ensure_fitted()?;
        let mut total = Array1::zeros(features.nrows());
        for member in &self.members {
            let raw = member.raw_outputs(features)?;
            total.zip_mut_with(&raw, |t, &r| *t += member.norm.normalize(r));
        }
        let scale = self.target_std / self.members.len() as f64;
        total.mapv_inplace(|t| t * scale);
        Ok(total)
    }

    pub fn predict_reward(&self, features: &[f64]) -> Result<f64> {
        let view = ArrayView2::from_shape((1, features.len()), features).map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.predict_batch(view)?[0])
    }

    /// `P̂[σ¹ ≻ σ²]` under one member.
    pub fn preference_probability(&self, member: usize, first: &TrajectorySegment, second: &TrajectorySegment) -> Result<f64> {
        let m = self
            .members
            .get(member)
            .ok_or_else(|| Error::contract(format!("no ensemble member {member}")))?;
        if first.len() != second.len() {
            return Err(Error::contract("compared segments differ in length"));
        }
        Ok(preference_from_sums(m.segment_sum(first)?, m.segment_sum(second)?))
    }

    /// Raw segment sums under every member.
    pub fn member_sums(&self, segment: &TrajectorySegment) -> Result<Vec<f64>> {
        self.members.iter().map(|m| m.segment_sum(segment)).collect()
    }

    /// Cross-entropy of `records` under one member, summed over records.
    pub fn preference_loss(&self, member: usize, records: &[PreferenceRecord], segments: &SegmentStore) -> Result<f64> {
        let m = self
            .members
            .get(member)
            .ok_or_else(|| Error::contract(format!("no ensemble member {member}")))?;
        let mut cache = HashMap::new();
        let mut total = 0.0;
        for r in records {
            let s1 = cached_sum(m, r.seg1_id, segments, &mut cache)?;
            let s2 = cached_sum(m, r.seg2_id, segments, &mut cache)?;
            total += preference_loss_terms(r.mu.0, s1, s2).0;
        }
        Ok(total)
    }
}

fn cached_sum(
    member: &MemberPredictor,
    id: SegmentId,
    segments: &SegmentStore,
    cache: &mut HashMap<SegmentId, f64>,
) -> Result<f64> {
    if let Some(&s) = cache.get(&id) {
        return Ok(s);
    }
    let s = member.segment_sum(segments.get(id)?)?;
    cache.insert(id, s);
    Ok(s)
}

impl RewardPredictor for RewardModel {
    fn predict_rewards(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.predict_batch(features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Bradley-Terry cross-entropy on comparisons.
    Preferences,
    /// Mean squared error between predicted segment sums and true segment returns.
    TargetRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub ensemble_size: usize,
    pub hidden: usize,
    /// Spread of the normalised ensemble output.
    pub target_std: f64,
    pub lr: f64,
    pub minibatch: usize,
    pub initial_l2: f64,
    /// Adaptive ℓ2 on; when off, no ℓ2 and no dropout.
    pub regularize: bool,
    pub l2_factor: f64,
    /// Hidden-layer dropout keep probability, if dropout is enabled.
    pub dropout_keep: Option<f64>,
    pub norm_decay: f64,
    pub mode: FitMode,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 3,
            hidden: 64,
            target_std: 1.0,
            lr: 1e-3,
            minibatch: 32,
            initial_l2: 1e-3,
            regularize: true,
            l2_factor: 1.1,
            dropout_keep: None,
            norm_decay: 0.999,
            mode: FitMode::Preferences,
        }
    }
}

/// New ℓ2 coefficient after one epoch: raised when validation loss exceeds
/// 1.5× training loss, lowered below 1.1×, clamped to `[1e-8, 1e2]`.
pub fn adapt_regularization(coeff: f64, train_loss: f64, val_loss: f64, factor: f64) -> f64 {
    let ratio = val_loss / train_loss.max(1e-12);
    let next = if ratio > VALIDATION_BAND.1 {
        coeff * factor
    } else if ratio < VALIDATION_BAND.0 {
        coeff / factor
    } else {
        coeff
    };
    next.clamp(L2_MIN, L2_MAX)
}

/// A segment with its true return, for the target-regression ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub record_id: RecordId,
    pub segment_id: SegmentId,
    pub target: f64,
}

#[derive(Debug, Clone)]
struct MemberTraining {
    adam: Adam,
    /// Bootstrap multiplicity per record; zero means held out.
    counts: HashMap<RecordId, u32>,
    l2: f64,
    rng: ChaCha8Rng,
}

impl MemberTraining {
    fn sync_counts(&mut self, ids: &[RecordId]) {
        let poisson = Poisson::new(1.0).expect("valid rate");
        let live: std::collections::HashSet<RecordId> = ids.iter().copied().collect();
        self.counts.retain(|id, _| live.contains(id));
        for id in ids {
            if !self.counts.contains_key(id) {
                let draw: f64 = poisson.sample(&mut self.rng);
                self.counts.insert(*id, draw as u32);
            }
        }
    }

    /// Indices into `ids` repeated by multiplicity, and the held-out indices.
    fn split(&self, ids: &[RecordId]) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.counts.get(id).copied().unwrap_or(0) {
                0 => holdout.push(i),
                c => train.extend(std::iter::repeat_n(i, c as usize)),
            }
        }
        (train, holdout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberDiagnostics {
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub l2: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub version: u64,
    pub members: Vec<MemberDiagnostics>,
}

impl FitDiagnostics {
    pub fn mean_train_loss(&self) -> f64 {
        self.members.iter().map(|m| m.train_loss).sum::<f64>() / self.members.len().max(1) as f64
    }

    pub fn mean_validation_loss(&self) -> Option<f64> {
        let vals: Vec<f64> = self.members.iter().filter_map(|m| m.validation_loss).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Training side of the ensemble: owns a private [`RewardModel`] plus
/// per-member optimiser state and bootstrap assignments.
#[derive(Debug, Clone)]
pub struct RewardTrainer {
    model: RewardModel,
    training: Vec<MemberTraining>,
    pub config: RewardModelConfig,
}

/// One labelled example as seen by the minibatch loop.
enum Example<'a> {
    Pair { first: &'a TrajectorySegment, second: &'a TrajectorySegment, mu: [f64; 2] },
    Target { segment: &'a TrajectorySegment, target: f64 },
}

impl RewardTrainer {
    pub fn new(feature_dim: usize, config: RewardModelConfig, seed: u64) -> Result<Self> {
        if config.ensemble_size == 0 {
            return Err(Error::config("ensemble needs at least one member"));
        }
        if !(config.target_std > 0.0) {
            return Err(Error::config("target reward std must be positive"));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let keep = if config.regularize { config.dropout_keep.unwrap_or(1.0) } else { 1.0 };
        let specs = [
            LayerSpec::new(feature_dim, config.hidden, Activation::leaky_relu()).with_dropout(keep),
            LayerSpec::new(config.hidden, config.hidden, Activation::leaky_relu()).with_dropout(keep),
            LayerSpec::new(config.hidden, 1, Activation::Identity),
        ];
        let mut members = Vec::with_capacity(config.ensemble_size);
        let mut training = Vec::with_capacity(config.ensemble_size);
        for _ in 0..config.ensemble_size {
            members.push(MemberPredictor {
                net: Net::new(&specs, 1.0, 0.01, seeder.random())?,
                norm: RunningNorm::default(),
            });
            training.push(MemberTraining {
                adam: Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }),
                counts: HashMap::new(),
                l2: if config.regularize { config.initial_l2 } else { 0.0 },
                rng: ChaCha8Rng::seed_from_u64(seeder.random()),
            });
        }
        Ok(Self {
            model: RewardModel { members, target_std: config.target_std, version: 0 },
            training,
            config,
        })
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    /// Immutable copy of the current predictor for readers on other processes.
    pub fn publish(&self) -> Arc<RewardModel> {
        Arc::new(self.model.clone())
    }

    pub fn version(&self) -> u64 {
        self.model.version
    }

    pub fn l2_coefficients(&self) -> Vec<f64> {
        self.training.iter().map(|t| t.l2).collect()
    }

    /// Bootstrap multiplicities a member currently holds for each record id.
    pub fn bootstrap_counts(&self, member: usize) -> Option<&HashMap<RecordId, u32>> {
        self.training.get(member).map(|t| &t.counts)
    }

    /// Folds member outputs on recent rollout features into each member's
    /// normalisation statistics.
    pub fn refresh_normalization(&mut self, features: ArrayView2<f64>) -> Result<()> {
        if features.nrows() == 0 {
            return Ok(());
        }
        let decay = self.config.norm_decay;
        for member in &mut self.model.members {
            let raw = member.raw_outputs(features)?;
            member.norm.update(raw.as_slice().expect("contiguous"), decay);
        }
        Ok(())
    }

    /// One pass per member over its bootstrap sample of `records`, then
    /// validation, ℓ2 adaptation and a normalisation refresh from `recent`.
    pub fn fit_epoch(
        &mut self,
        records: &[PreferenceRecord],
        segments: &SegmentStore,
        recent: ArrayView2<f64>,
    ) -> Result<FitDiagnostics> {
        if self.config.mode != FitMode::Preferences {
            return Err(Error::config("preference fitting requested while in target-regression mode"));
        }
        if records.is_empty() {
            return Err(Error::config("cannot fit the reward model to an empty database"));
        }
        let ids: Vec<RecordId> = records.iter().map(|r| r.record_id).collect();
        let examples = records
            .iter()
            .map(|r| {
                Ok(Example::Pair {
                    first: segments.get(r.seg1_id)?,
                    second: segments.get(r.seg2_id)?,
                    mu: r.mu.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.fit_examples(&ids, &examples, recent)
    }

    /// Target-regression ablation: fit segment sums to true segment returns.
    pub fn fit_target_regression(
        &mut self,
        records: &[TargetRecord],
        segments: &SegmentStore,
        recent: ArrayView2<f64>,
    ) -> Result<FitDiagnostics> {
        if self.config.mode != FitMode::TargetRegression {
            return Err(Error::config("target regression is only available in the target ablation"));
        }
        if records.is_empty() {
            return Err(Error::config("cannot fit the reward model to an empty target set"));
        }
        let ids: Vec<RecordId> = records.iter().map(|r| r.record_id).collect();
        let examples = records
            .iter()
            .map(|r| Ok(Example::Target { segment: segments.get(r.segment_id)?, target: r.target }))
            .collect::<Result<Vec<_>>>()?;
        self.fit_examples(&ids, &examples, recent)
    }

    fn fit_examples(&mut self, ids: &[RecordId], examples: &[Example<'_>], recent: ArrayView2<f64>) -> Result<FitDiagnostics> {
        let mut diagnostics = Vec::with_capacity(self.model.members.len());
        let regularize = self.config.regularize;
        for (member, state) in self.model.members.iter_mut().zip(&mut self.training) {
            state.sync_counts(ids);
            let (mut train, holdout) = state.split(ids);
            let validation_available = !holdout.is_empty() && !train.is_empty();
            if train.is_empty() {
                train = (0..ids.len()).collect();
            }
            train.shuffle(&mut state.rng);
            let mut loss_sum = 0.0;
            for batch in train.chunks(self.config.minibatch.max(1)) {
                let picked: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
                let (loss, grads) = batch_loss_and_grad(&mut member.net, &picked, Mode::Train)?;
                if !loss.is_finite() {
                    return Err(Error::training("non-finite reward-model loss"));
                }
                loss_sum += loss * batch.len() as f64;
                state.adam.step(&mut member.net, &grads, state.l2)?;
            }
            member.net.clear_cache();
            let train_loss = loss_sum / train.len() as f64;
            let validation_loss = if validation_available {
                let picked: Vec<&Example> = holdout.iter().map(|&i| &examples[i]).collect();
                let loss = batch_loss(&member.net, &picked)?;
                if !loss.is_finite() {
                    return Err(Error::training("non-finite validation loss"));
                }
                Some(loss)
            } else {
                None
            };
            if regularize {
                if let Some(val) = validation_loss {
                    state.l2 = adapt_regularization(state.l2, train_loss, val, self.config.l2_factor);
                }
            }
            diagnostics.push(MemberDiagnostics {
                train_loss,
                validation_loss,
                l2: state.l2,
                train_size: train.len(),
                holdout_size: if validation_available { holdout.len() } else { 0 },
            });
        }
        self.refresh_normalization(recent)?;
        self.model.version += 1;
        Ok(FitDiagnostics { version: self.model.version, members: diagnostics })
    }
}

/// Stacks every segment's feature rows; returns the matrix and each segment's row range.
fn stack_segments(segments: &[&TrajectorySegment]) -> (Array2<f64>, Vec<(usize, usize)>) {
    let width = segments[0].features().ncols();
    let rows: usize = segments.iter().map(|s| s.len()).sum();
    let mut out = Array2::zeros((rows, width));
    let mut ranges = Vec::with_capacity(segments.len());
    let mut at = 0;
    for seg in segments {
        let n = seg.len();
        out.slice_mut(ndarray::s![at..at + n, ..]).assign(seg.features());
        ranges.push((at, at + n));
        at += n;
    }
    (out, ranges)
}

fn example_segments<'a>(examples: &[&Example<'a>]) -> Vec<&'a TrajectorySegment> {
    let mut segs = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        match ex {
            Example::Pair { first, second, .. } => {
                segs.push(*first);
                segs.push(*second);
            }
            Example::Target { segment, .. } => segs.push(*segment),
        }
    }
    segs
}

/// Mean loss over `examples` and `d loss / d segment-sum` for each stacked segment.
fn example_losses(examples: &[&Example<'_>], sums: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut dsum = vec![0.0; sums.len()];
    let mut at = 0;
    for ex in examples {
        match ex {
            Example::Pair { mu, .. } => {
                let (l, d) = preference_loss_terms(*mu, sums[at], sums[at + 1]);
                loss += inv * l;
                dsum[at] = inv * d;
                dsum[at + 1] = -inv * d;
                at += 2;
            }
            Example::Target { target, .. } => {
                let diff = sums[at] - target;
                loss += inv * diff * diff;
                dsum[at] = inv * 2.0 * diff;
                at += 1;
            }
        }
    }
    (loss, dsum)
}

fn batch_loss_and_grad(net: &mut Net, examples: &[&Example<'_>], mode: Mode) -> Result<(f64, crate::nn::Gradients)> {
    let segs = example_segments(examples);
    let (features, ranges) = stack_segments(&segs);
    let out = net.forward(features.view(), mode)?;
    let sums: Vec<f64> = ranges.iter().map(|&(a, b)| out.slice(ndarray::s![a..b, 0]).sum()).collect();
    let (loss, dsum) = example_losses(examples, &sums);
    let mut upstream = Array2::zeros(out.raw_dim());
    for (&(a, b), d) in ranges.iter().zip(&dsum) {
        upstream.slice_mut(ndarray::s![a..b, 0]).fill(*d);
    }
    Ok((loss, net.backward(upstream.view())?))
}

/// Mean preference cross-entropy of `net` over labelled pairs and its
/// parameter gradient, without dropout.
pub fn pair_loss_and_grad(net: &mut Net, pairs: &[(&TrajectorySegment, &TrajectorySegment, Mu)]) -> Result<(f64, crate::nn::Gradients)> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let examples: Vec<Example> = pairs.iter().map(|(a, b, mu)| Example::Pair { first: a, second: b, mu: mu.0 }).collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let out = batch_loss_and_grad(net, &refs, Mode::Eval);
    net.clear_cache();
    out
}

/// Mean preference cross-entropy of `net` over labelled pairs.
pub fn pair_loss(net: &Net, pairs: &[(&TrajectorySegment, &TrajectorySegment, Mu)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let examples: Vec<Example> = pairs.iter().map(|(a, b, mu)| Example::Pair { first: a, second: b, mu: mu.0 }).collect();
    let refs: Vec<&Example> = examples.iter().collect();
    batch_loss(net, &refs)
}

fn batch_loss(net: &Net, examples: &[&Example<'_>]) -> Result<f64> {
    let segs = example_segments(examples);
    let (features, ranges) = stack_segments(&segs);
    let out = net.predict(features.view())?;
    let sums: Vec<f64> = ranges.iter().map(|&(a, b)| out.slice(ndarray::s![a..b, 0]).sum()).collect();
    Ok(example_losses(examples, &sums).0)
}
