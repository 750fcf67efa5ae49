//! Advantage actor-critic against a (possibly learned) reward stream.
//!
//! Rollouts step `N` environments round-robin on the calling thread, `n` steps
//! each. Rewards come from a [`RewardSource`]; in learned mode the true reward
//! attached to each transition is never read on the way into a batch, which the
//! [`RolloutAudits::policy`] counter makes checkable.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, Action, ActionSpace, EnvSpec, Environment, Frame, Observation, RewardAudit};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Gradients, Mode, Net};
use crate::segment::{SegmentId, TrajectorySegment};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const POLICY_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyHyperparams {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_bonus: f64,
    pub lr: f64,
    pub value_lr: f64,
    /// Steps per worker per update (`n`).
    pub steps_per_update: usize,
    /// Parallel environment instances (`N`).
    pub workers: usize,
    pub grad_clip: f64,
    pub adam_eps: f64,
}

impl PolicyHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.entropy_bonus >= 0.0) {
            return Err(Error::config("entropy bonus must be non-negative"));
        }
        if self.steps_per_update == 0 || self.workers == 0 {
            return Err(Error::config("steps per update and workers must be positive"));
        }
        Ok(())
    }
}

/// Stochastic policy: a tanh MLP trunk with a Gaussian (state-independent
/// log-std) or softmax head depending on the action space.
#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Net,
    pub log_std: Vec<f64>,
    pub space: ActionSpace,
}

impl Policy {
    pub fn new(spec: &EnvSpec, seed: u64) -> Result<Self> {
        let (out, log_std) = match spec.action_space {
            ActionSpace::Continuous { dim, .. } => (dim, vec![0.0; dim]),
            ActionSpace::Discrete { n } => (n, Vec::new()),
        };
        let net = Net::mlp(spec.observation_dim, &POLICY_HIDDEN, out, Activation::Tanh, 0.01, seed)?;
        Ok(Self { net, log_std, space: spec.action_space })
    }

    /// Samples one action per row of `obs`; returns actions and their log-probabilities.
    pub fn sample(&self, obs: ArrayView2<f64>, rng: &mut impl Rng) -> Result<(Vec<Action>, Vec<f64>)> {
        let head = self.net.predict(obs)?;
        let mut actions = Vec::with_capacity(head.nrows());
        let mut log_probs = Vec::with_capacity(head.nrows());
        for row in head.rows() {
            match self.space {
                ActionSpace::Continuous { .. } => {
                    let mut a = Vec::with_capacity(row.len());
                    let mut lp = 0.0;
                    for (mean, ls) in row.iter().zip(&self.log_std) {
                        let eps: f64 = rng.sample(StandardNormal);
                        a.push(mean + ls.exp() * eps);
                        lp += -0.5 * eps * eps - ls - HALF_LN_2PI;
                    }
                    actions.push(Action::Continuous(a));
                    log_probs.push(lp);
                }
                ActionSpace::Discrete { .. } => {
                    let probs = softmax(row.as_slice().expect("contiguous row"));
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut choice = probs.len() - 1;
                    for (i, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            choice = i;
                            break;
                        }
                    }
                    log_probs.push(probs[choice].max(1e-300).ln());
                    actions.push(Action::Discrete(choice));
                }
            }
        }
        Ok((actions, log_probs))
    }

    /// Most likely action for each row; used for deterministic evaluation.
    pub fn greedy(&self, obs: ArrayView2<f64>) -> Result<Vec<Action>> {
        let head = self.net.predict(obs)?;
        Ok(head
            .rows()
            .into_iter()
            .map(|row| match self.space {
                ActionSpace::Continuous { .. } => Action::Continuous(row.to_vec()),
                ActionSpace::Discrete { .. } => Action::Discrete(argmax(row.as_slice().expect("contiguous row"))),
            })
            .collect())
    }

    /// Loss `−mean(log π(a|s)·A) − β·mean(H)` and its gradient. Leaves the
    /// network's forward cache populated for `obs`.
    pub fn loss_and_grad(
        &mut self,
        obs: ArrayView2<f64>,
        actions: &[Action],
        advantages: &[f64],
        entropy_bonus: f64,
    ) -> Result<(PolicyLoss, PolicyGrad)> {
        let batch = obs.nrows();
        if actions.len() != batch || advantages.len() != batch {
            return Err(Error::contract("policy loss inputs have mismatched lengths"));
        }
        let head = self.net.forward(obs, Mode::Eval)?;
        let inv_b = 1.0 / batch as f64;
        let mut upstream = Array2::zeros(head.raw_dim());
        let mut log_std_grad = vec![0.0; self.log_std.len()];
        let mut pg = 0.0;
        let mut entropy = 0.0;
        for (i, (row, action)) in head.rows().into_iter().zip(actions).enumerate() {
            let adv = advantages[i];
            match (self.space, action) {
                (ActionSpace::Continuous { .. }, Action::Continuous(a)) => {
                    let mut lp = 0.0;
                    for j in 0..a.len() {
                        let ls = self.log_std[j];
                        let var = (2.0 * ls).exp();
                        let diff = a[j] - row[j];
                        lp += -0.5 * diff * diff / var - ls - HALF_LN_2PI;
                        upstream[[i, j]] = -inv_b * adv * diff / var;
                        log_std_grad[j] += -inv_b * adv * (diff * diff / var - 1.0);
                    }
                    pg -= inv_b * adv * lp;
                    entropy += inv_b * self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum::<f64>();
                }
                (ActionSpace::Discrete { .. }, Action::Discrete(choice)) => {
                    let probs = softmax(row.as_slice().expect("contiguous row"));
                    let logs: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
                    let h = -probs.iter().zip(&logs).map(|(p, l)| p * l).sum::<f64>();
                    pg -= inv_b * adv * logs[*choice];
                    entropy += inv_b * h;
                    for k in 0..probs.len() {
                        let dlogp = if k == *choice { 1.0 } else { 0.0 } - probs[k];
                        let dh = -probs[k] * (logs[k] + h);
                        upstream[[i, k]] = -inv_b * (adv * dlogp + entropy_bonus * dh);
                    }
                }
                _ => return Err(Error::contract("action kind does not match the policy head")),
            }
        }
        for g in &mut log_std_grad {
            *g -= entropy_bonus;
        }
        let net_grad = self.net.backward(upstream.view())?;
        let loss = PolicyLoss {
            policy_loss: pg,
            entropy,
            total: pg - entropy_bonus * entropy,
        };
        Ok((loss, PolicyGrad { net: net_grad, log_std: log_std_grad }))
    }

    /// Mean entropy of the action distribution over `obs`.
    pub fn entropy(&self, obs: ArrayView2<f64>) -> Result<f64> {
        match self.space {
            ActionSpace::Continuous { .. } => Ok(self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()),
            ActionSpace::Discrete { .. } => {
                let head = self.net.predict(obs)?;
                let total: f64 = head
                    .rows()
                    .into_iter()
                    .map(|row| {
                        let p = softmax(row.as_slice().expect("contiguous row"));
                        -p.iter().map(|q| if *q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>()
                    })
                    .sum();
                Ok(total / head.nrows().max(1) as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLoss {
    pub policy_loss: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub net: Gradients,
    pub log_std: Vec<f64>,
}

impl PolicyGrad {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.net.flat();
        out.extend_from_slice(&self.log_std);
        out
    }
}

#[derive(Debug, Clone)]
pub struct ValueFn {
    pub net: Net,
}

impl ValueFn {
    pub fn new(spec: &EnvSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Net::mlp(spec.observation_dim, &POLICY_HIDDEN, 1, Activation::Tanh, 1.0, seed)?,
        })
    }

    pub fn predict(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(obs)?.remove_axis(Axis(1)))
    }

    /// Mean squared error against `targets` and its gradient.
    pub fn loss_and_grad(&mut self, obs: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Gradients)> {
        if targets.len() != obs.nrows() {
            return Err(Error::contract("value targets do not match the batch"));
        }
        let pred = self.net.forward(obs, Mode::Eval)?;
        let inv_b = 1.0 / targets.len() as f64;
        let mut upstream = Array2::zeros(pred.raw_dim());
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let diff = pred[[i, 0]] - t;
            loss += inv_b * diff * diff;
            upstream[[i, 0]] = 2.0 * inv_b * diff;
        }
        Ok((loss, self.net.backward(upstream.view())?))
    }
}

/// One rollout: `n` steps from each of `N` workers, stored time-major
/// (row `t·N + w` is worker `w` at step `t`).
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub steps: usize,
    pub workers: usize,
    pub observations: Array2<f64>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Value estimate of each worker's state after the last step.
    pub bootstrap_values: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl AdvantageEstimate {
    /// Advantages shifted and scaled to zero mean, unit standard deviation.
    pub fn standardized(&self) -> Vec<f64> {
        let n = self.advantages.len().max(1) as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-8 {
            return self.advantages.iter().map(|a| a - mean).collect();
        }
        self.advantages.iter().map(|a| (a - mean) / std).collect()
    }
}

/// Generalised advantage estimation over a time-major batch with no episode
/// breaks: `δ_t = r_t + γV(s_{t+1}) − V(s_t)`, `A_t = Σ_l (γλ)^l δ_{t+l}`.
pub fn compute_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> AdvantageEstimate {
    let (n, w) = (batch.steps, batch.workers);
    let mut advantages = vec![0.0; n * w];
    for worker in 0..w {
        let mut running = 0.0;
        for t in (0..n).rev() {
            let idx = t * w + worker;
            let next_value = if t + 1 == n {
                batch.bootstrap_values[worker]
            } else {
                batch.values[idx + w]
            };
            let delta = batch.rewards[idx] + gamma * next_value - batch.values[idx];
            running = delta + gamma * lambda * running;
            advantages[idx] = running;
        }
    }
    let returns = advantages.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    AdvantageEstimate { advantages, returns }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct A2cDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Policy, value function and their optimisers.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub policy: Policy,
    pub value: ValueFn,
    pub hyper: PolicyHyperparams,
    policy_opt: Adam,
    value_opt: Adam,
    returns: ReturnScaler,
    /// Number of updates applied so far.
    pub version: u64,
}

impl ActorCritic {
    pub fn new(spec: &EnvSpec, hyper: PolicyHyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let policy = Policy::new(spec, seed.wrapping_mul(2).wrapping_add(1))?;
        let value = ValueFn::new(spec, seed.wrapping_mul(2).wrapping_add(2))?;
        let adam = |lr| Adam::new(AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: hyper.adam_eps });
        Ok(Self {
            policy,
            value,
            hyper,
            policy_opt: adam(hyper.lr),
            value_opt: adam(hyper.value_lr),
            returns: ReturnScaler::new(hyper.workers, hyper.gamma),
            version: 0,
        })
    }

    /// Rescales the batch rewards by the running spread of discounted returns,
    /// estimates advantages and applies one update.
    pub fn learn(&mut self, batch: &mut RolloutBatch) -> Result<A2cDiagnostics> {
        self.returns.rescale(batch);
        let est = compute_gae(batch, self.hyper.gamma, self.hyper.lambda);
        let advantages = est.standardized();
        a2c_update(self, batch, &advantages, &est.returns)
    }

    /// The entropy bonus is the one policy hyperparameter adjustable mid-run.
    pub fn set_entropy_bonus(&mut self, beta: f64) -> Result<()> {
        if !(beta >= 0.0) {
            return Err(Error::config("entropy bonus must be non-negative"));
        }
        self.hyper.entropy_bonus = beta;
        Ok(())
    }
}

/// Running standard deviation of per-worker discounted reward sums. Dividing
/// rewards by it keeps value targets near unit scale whatever the reward scale.
#[derive(Debug, Clone)]
struct ReturnScaler {
    gamma: f64,
    discounted: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnScaler {
    fn new(workers: usize, gamma: f64) -> Self {
        Self { gamma, discounted: vec![0.0; workers], count: 0.0, mean: 0.0, m2: 0.0 }
    }

    fn rescale(&mut self, batch: &mut RolloutBatch) {
        if self.discounted.len() != batch.workers {
            self.discounted = vec![0.0; batch.workers];
        }
        for (idx, r) in batch.rewards.iter().enumerate() {
            let w = idx % batch.workers;
            self.discounted[w] = self.gamma * self.discounted[w] + r;
            self.count += 1.0;
            let delta = self.discounted[w] - self.mean;
            self.mean += delta / self.count;
            self.m2 += delta * (self.discounted[w] - self.mean);
        }
        let std = (self.m2 / self.count.max(1.0)).sqrt();
        let scale = 1.0 / std.max(1e-4);
        batch.rewards.iter_mut().for_each(|r| *r *= scale);
    }
}

fn clip_scale(norm_sq: f64, max_norm: f64) -> f64 {
    let norm = norm_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// One gradient step on policy and value function from a batch.
/// `advantages` must already be standardised.
pub fn a2c_update(
    learner: &mut ActorCritic,
    batch: &RolloutBatch,
    advantages: &[f64],
    returns: &[f64],
) -> Result<A2cDiagnostics> {
    let beta = learner.hyper.entropy_bonus;
    let obs = batch.observations.view();
    let (ploss, mut pgrad) = learner.policy.loss_and_grad(obs, &batch.actions, advantages, beta)?;
    let (vloss, mut vgrad) = learner.value.loss_and_grad(obs, returns)?;
    if !ploss.total.is_finite() || !vloss.is_finite() {
        return Err(Error::training(format!(
            "non-finite loss (policy {}, value {vloss})",
            ploss.total
        )));
    }
    let clip = learner.hyper.grad_clip;
    let p_scale = clip_scale(
        pgrad.net.sum_squares() + pgrad.log_std.iter().map(|g| g * g).sum::<f64>(),
        clip,
    );
    pgrad.net.scale(p_scale);
    pgrad.log_std.iter_mut().for_each(|g| *g *= p_scale);
    vgrad.scale(clip_scale(vgrad.sum_squares(), clip));

    let Policy { net, log_std, .. } = &mut learner.policy;
    let extra = (!log_std.is_empty()).then_some((log_std.as_mut_slice(), pgrad.log_std.as_slice()));
    learner.policy_opt.step_with_extra(net, &pgrad.net, extra, 0.0)?;
    learner.value_opt.step(&mut learner.value.net, &vgrad, 0.0)?;
    learner.policy.net.clear_cache();
    learner.value.net.clear_cache();
    learner.version += 1;
    Ok(A2cDiagnostics {
        policy_loss: ploss.policy_loss,
        value_loss: vloss,
        entropy: ploss.entropy,
    })
}

/// Anything that turns reward-model feature rows into per-step rewards.
pub trait RewardPredictor {
    fn predict_rewards(&self, features: ArrayView2<f64>) -> Result<Array1<f64>>;
}

pub enum RewardSource<'a> {
    /// Environment reward: baseline runs only.
    True,
    Learned(&'a dyn RewardPredictor),
    /// All-zero rewards, for collecting clips before any reward exists. Such
    /// batches are not meant to be learned from.
    Unrewarded,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RolloutAudits {
    /// True-reward reads feeding batch rewards.
    pub policy: RewardAudit,
    /// True-reward reads for episode-return bookkeeping.
    pub evaluation: RewardAudit,
    /// True-reward reads copied into segments for the synthetic oracle.
    pub labeling: RewardAudit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub true_return: f64,
    pub predicted_return: f64,
    /// Global step at which the episode finished.
    pub end_step: u64,
}

#[derive(Debug)]
pub struct RolloutOutput {
    pub batch: RolloutBatch,
    pub segments: Vec<TrajectorySegment>,
    pub episodes: Vec<EpisodeStats>,
}

#[derive(Debug, Default)]
struct SegmentBuilder {
    observations: Vec<Observation>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    frames: Vec<Frame>,
    start_step: u64,
}

/// `N` environment instances stepped round-robin, plus the bookkeeping that
/// turns their streams into segments and episode statistics.
pub struct RolloutWorkers {
    spec: EnvSpec,
    envs: Vec<Box<dyn Environment>>,
    obs: Vec<Observation>,
    rng: ChaCha8Rng,
    builders: Vec<SegmentBuilder>,
    segment_length: usize,
    render: bool,
    next_segment_id: u64,
    steps: u64,
    episode_true: Vec<f64>,
    episode_pred: Vec<f64>,
    pub audits: RolloutAudits,
}

impl RolloutWorkers {
    pub fn new(spec: &EnvSpec, workers: usize, segment_length: usize, render: bool, seed: u64) -> Result<Self> {
        if workers == 0 || segment_length == 0 {
            return Err(Error::config("workers and segment length must be positive"));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut envs = Vec::with_capacity(workers);
        let mut obs = Vec::with_capacity(workers);
        for _ in 0..workers {
            let mut env = make_env(spec.id);
            obs.push(env.reset(seeder.random()));
            envs.push(env);
        }
        Ok(Self {
            spec: spec.clone(),
            envs,
            obs,
            rng: ChaCha8Rng::seed_from_u64(seeder.random()),
            builders: (0..workers).map(|_| SegmentBuilder::default()).collect(),
            segment_length,
            render,
            next_segment_id: 0,
            steps: 0,
            episode_true: vec![0.0; workers],
            episode_pred: vec![0.0; workers],
            audits: RolloutAudits::default(),
        })
    }

    pub fn workers(&self) -> usize {
        self.envs.len()
    }

    /// Total environment steps taken across all workers.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn obs_matrix(&self) -> Array2<f64> {
        let d = self.spec.observation_dim;
        let flat: Vec<f64> = self.obs.iter().flat_map(|o| o.iter().copied()).collect();
        Array2::from_shape_vec((self.obs.len(), d), flat).expect("observation width is fixed")
    }

    /// Collects `steps` steps from every worker with actions sampled from `policy`.
    pub fn collect(
        &mut self,
        learner: &ActorCritic,
        reward: RewardSource<'_>,
        steps: usize,
    ) -> Result<RolloutOutput> {
        let workers = self.envs.len();
        let obs_dim = self.spec.observation_dim;
        let feat_dim = self.spec.feature_dim();
        let total = steps * workers;
        let mut observations = Vec::with_capacity(total * obs_dim);
        let mut features = Vec::with_capacity(total * feat_dim);
        let mut actions = Vec::with_capacity(total);
        let mut log_probs = Vec::with_capacity(total);
        let mut true_rewards = Vec::with_capacity(total);
        let mut ends = Vec::with_capacity(total);
        let mut step_ids = Vec::with_capacity(total);
        let mut segments = Vec::new();
        let mut pending_segments: Vec<(usize, SegmentBuilder)> = Vec::new();

        for _ in 0..steps {
            let current = self.obs_matrix();
            let (sampled, lps) = learner.policy.sample(current.view(), &mut self.rng)?;
            for (w, (action, lp)) in sampled.into_iter().zip(lps).enumerate() {
                let (next, transition) = self.envs[w].step(&action, self.render)?;
                self.steps += 1;
                observations.extend_from_slice(&transition.observation);
                features.extend_from_slice(&transition.observation);
                self.spec.action_space.encode_into(&transition.action, &mut features);
                let builder = &mut self.builders[w];
                if builder.observations.is_empty() {
                    builder.start_step = self.steps - 1;
                }
                builder.observations.push(transition.observation);
                builder.actions.push(transition.action);
                builder.rewards.push(transition.true_reward.reveal(&mut self.audits.labeling));
                if let Some(frame) = transition.frame {
                    builder.frames.push(frame);
                }
                if builder.observations.len() == self.segment_length {
                    pending_segments.push((w, std::mem::take(builder)));
                }
                true_rewards.push(transition.true_reward);
                ends.push(transition.episode_end);
                step_ids.push(self.steps);
                // Actions are stored as sampled so log-probabilities stay consistent.
                actions.push(action);
                log_probs.push(lp);
                self.obs[w] = next;
            }
        }
        for (_, b) in pending_segments {
            let id = SegmentId(self.next_segment_id);
            self.next_segment_id += 1;
            segments.push(TrajectorySegment::new(
                id,
                b.observations,
                b.actions,
                Some(b.rewards),
                learner.version,
                b.start_step,
                b.frames,
                &self.spec.action_space,
            )?);
        }

        let observations = Array2::from_shape_vec((total, obs_dim), observations).expect("fixed width");
        let rewards: Vec<f64> = match reward {
            RewardSource::True => true_rewards
                .iter()
                .map(|r| r.reveal(&mut self.audits.policy))
                .collect(),
            RewardSource::Unrewarded => vec![0.0; total],
            RewardSource::Learned(model) => {
                let features = Array2::from_shape_vec((total, feat_dim), features).expect("fixed width");
                let predicted = model.predict_rewards(features.view())?;
                if predicted.iter().any(|r| !r.is_finite()) {
                    return Err(Error::training("reward model produced a non-finite reward"));
                }
                predicted.to_vec()
            }
        };

        let mut episodes = Vec::new();
        for (idx, (r, end)) in rewards.iter().zip(&ends).enumerate() {
            let w = idx % workers;
            self.episode_true[w] += true_rewards[idx].reveal(&mut self.audits.evaluation);
            self.episode_pred[w] += r;
            if *end {
                episodes.push(EpisodeStats {
                    true_return: self.episode_true[w],
                    predicted_return: self.episode_pred[w],
                    end_step: step_ids[idx],
                });
                self.episode_true[w] = 0.0;
                self.episode_pred[w] = 0.0;
            }
        }

        let values = learner.value.predict(observations.view())?.to_vec();
        let bootstrap_values = learner.value.predict(self.obs_matrix().view())?.to_vec();
        Ok(RolloutOutput {
            batch: RolloutBatch {
                steps,
                workers,
                observations,
                actions,
                log_probs,
                values,
                rewards,
                bootstrap_values,
            },
            segments,
            episodes,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
