//! Experiment configuration: a flat TOML table plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::oracle::OracleConfig;
use crate::policy::PolicyHyperparams;
use crate::query::{SelectionStrategy, DEFAULT_POOL_CAPACITY};
use crate::reward::{FitMode, RewardModelConfig};

use super::schedule::{LabelSchedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Oracle,
    Human,
    /// Baseline: the policy trains on the environment reward and no labels are collected.
    TrueReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// One thread, processes interleaved in a fixed order. Bit-reproducible.
    Sync,
    Threaded,
}

/// Every key accepted in a config file or `--set` override. Optional keys
/// take environment-specific defaults in [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub feedback: FeedbackSource,
    pub label_budget: usize,
    pub total_steps: u64,
    pub ensemble_size: usize,
    pub segment_length: Option<usize>,
    pub seed: u64,
    /// Share of the label budget spent on clips from the untrained policy.
    pub initial_fraction: f64,
    pub pretrain_epochs: Option<usize>,

    pub random_queries: bool,
    pub no_ensemble: bool,
    pub no_online_queries: bool,
    pub no_regularization: bool,
    pub no_segments: bool,
    pub target_regression: bool,

    pub schedule: ScheduleKind,
    /// Half-rate point `c` of the annealing curve; defaults to a fifth of `total_steps`.
    pub anneal_constant: Option<f64>,
    /// Window length of the stepped schedule.
    pub schedule_window: f64,
    pub execution: Execution,
    pub label_buffer: usize,
    pub pool_capacity: usize,
    /// Labels passed through the fitter per environment step.
    pub fit_labels_per_step: f64,
    /// Environment steps between metrics records.
    pub metrics_interval: u64,

    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub entropy_bonus: Option<f64>,
    pub lr: Option<f64>,
    pub value_lr: Option<f64>,
    pub steps_per_update: Option<usize>,
    pub workers: Option<usize>,
    pub grad_clip: Option<f64>,
    pub adam_eps: Option<f64>,

    pub reward_lr: f64,
    pub reward_minibatch: usize,
    pub reward_l2: f64,
    pub dropout: bool,
    pub target_std: Option<f64>,
    pub tie_tolerance: Option<f64>,
    pub clip_rewards: Option<bool>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Pendulum,
            feedback: FeedbackSource::Oracle,
            label_budget: 700,
            total_steps: 300_000,
            ensemble_size: 3,
            segment_length: None,
            seed: 0,
            initial_fraction: 0.25,
            pretrain_epochs: None,
            random_queries: false,
            no_ensemble: false,
            no_online_queries: false,
            no_regularization: false,
            no_segments: false,
            target_regression: false,
            schedule: ScheduleKind::Smooth,
            anneal_constant: None,
            schedule_window: 5e6,
            execution: Execution::Sync,
            label_buffer: 3000,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            fit_labels_per_step: 0.1,
            metrics_interval: 5_000,
            gamma: None,
            lambda: None,
            entropy_bonus: None,
            lr: None,
            value_lr: None,
            steps_per_update: None,
            workers: None,
            grad_clip: None,
            adam_eps: None,
            reward_lr: 1e-3,
            reward_minibatch: 32,
            reward_l2: 1e-3,
            dropout: false,
            target_std: None,
            tie_tolerance: None,
            clip_rewards: None,
        }
    }
}

/// Policy settings used when a config leaves them unset.
pub fn default_policy(env: EnvId) -> PolicyHyperparams {
    match env {
        EnvId::Pendulum => PolicyHyperparams {
            gamma: 0.95,
            lambda: 0.9,
            entropy_bonus: 0.01,
            lr: 1e-3,
            value_lr: 1e-3,
            steps_per_update: 8,
            workers: 8,
            grad_clip: 10.0,
            adam_eps: 1e-8,
        },
        EnvId::Arcade => PolicyHyperparams {
            gamma: 0.99,
            lambda: 0.95,
            entropy_bonus: 0.01,
            lr: 1e-3,
            value_lr: 1e-3,
            steps_per_update: 5,
            workers: 16,
            grad_clip: 10.0,
            adam_eps: 1e-5,
        },
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `env=arcade` works without quotes.
fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, then resolves defaults.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::config(format!("config parse error: {e}")))?;
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_override_value(value.trim()));
        }
        let raw: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        raw.resolved()
    }

    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Fills every optional key and applies the ablation implications:
    /// `no_ensemble` forces one member and random queries; `no_segments`
    /// forces single-step segments.
    pub fn resolved(mut self) -> Result<Self> {
        let spec = self.env.spec();
        let policy = default_policy(self.env);
        if self.no_ensemble {
            self.ensemble_size = 1;
            self.random_queries = true;
        }
        if self.no_segments {
            self.segment_length = Some(1);
        }
        self.segment_length.get_or_insert(spec.segment_length);
        self.pretrain_epochs.get_or_insert(match self.env {
            EnvId::Pendulum => 0,
            EnvId::Arcade => 200,
        });
        self.anneal_constant.get_or_insert(self.total_steps as f64 / 5.0);
        self.gamma.get_or_insert(policy.gamma);
        self.lambda.get_or_insert(policy.lambda);
        self.entropy_bonus.get_or_insert(policy.entropy_bonus);
        self.lr.get_or_insert(policy.lr);
        self.value_lr.get_or_insert(policy.value_lr);
        self.steps_per_update.get_or_insert(policy.steps_per_update);
        self.workers.get_or_insert(policy.workers);
        self.grad_clip.get_or_insert(policy.grad_clip);
        self.adam_eps.get_or_insert(policy.adam_eps);
        self.target_std.get_or_insert(match self.env {
            EnvId::Pendulum => 1.0,
            EnvId::Arcade => 0.05,
        });
        let oracle = OracleConfig::for_env(self.env);
        self.tie_tolerance.get_or_insert(oracle.tie_tolerance);
        self.clip_rewards.get_or_insert(oracle.clip_rewards);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.ensemble_size == 0 {
            return fail("ensemble_size must be at least 1".into());
        }
        if self.segment_length() == 0 {
            return fail("segment_length must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.initial_fraction) {
            return fail(format!("initial_fraction must lie in [0, 1], got {}", self.initial_fraction));
        }
        if !(self.anneal_constant.unwrap_or(0.0) > 0.0) {
            return fail("anneal_constant must be positive".into());
        }
        if !(self.schedule_window > 0.0) {
            return fail("schedule_window must be positive".into());
        }
        if self.label_buffer == 0 {
            return fail("label_buffer must be positive".into());
        }
        if self.pool_capacity < 2 {
            return fail("pool_capacity must be at least 2".into());
        }
        if !(self.fit_labels_per_step > 0.0) {
            return fail("fit_labels_per_step must be positive".into());
        }
        if self.metrics_interval == 0 {
            return fail("metrics_interval must be positive".into());
        }
        if self.reward_minibatch == 0 || !(self.reward_lr > 0.0) || !(self.reward_l2 >= 0.0) {
            return fail("reward_lr, reward_minibatch and reward_l2 must be positive".into());
        }
        if !(self.target_std.unwrap_or(0.0) > 0.0) {
            return fail("target_std must be positive".into());
        }
        if self.feedback == FeedbackSource::TrueReward
            && (self.random_queries || self.no_online_queries || self.target_regression || self.no_segments)
        {
            return fail("ablation flags have no meaning with feedback = \"true_reward\"".into());
        }
        self.policy_hyper().validate()?;
        self.oracle().validate()
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length.unwrap_or_else(|| self.env.spec().segment_length)
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(0)
    }

    pub fn uses_labels(&self) -> bool {
        self.feedback != FeedbackSource::TrueReward
    }

    pub fn policy_hyper(&self) -> PolicyHyperparams {
        let d = default_policy(self.env);
        PolicyHyperparams {
            gamma: self.gamma.unwrap_or(d.gamma),
            lambda: self.lambda.unwrap_or(d.lambda),
            entropy_bonus: self.entropy_bonus.unwrap_or(d.entropy_bonus),
            lr: self.lr.unwrap_or(d.lr),
            value_lr: self.value_lr.unwrap_or(d.value_lr),
            steps_per_update: self.steps_per_update.unwrap_or(d.steps_per_update),
            workers: self.workers.unwrap_or(d.workers),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
        }
    }

    pub fn reward_config(&self) -> RewardModelConfig {
        RewardModelConfig {
            ensemble_size: self.ensemble_size,
            target_std: self.target_std.unwrap_or(1.0),
            lr: self.reward_lr,
            minibatch: self.reward_minibatch,
            initial_l2: self.reward_l2,
            regularize: !self.no_regularization,
            dropout_keep: self.dropout.then_some(0.5),
            mode: if self.target_regression { FitMode::TargetRegression } else { FitMode::Preferences },
            ..RewardModelConfig::default()
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        let d = OracleConfig::for_env(self.env);
        OracleConfig {
            tie_tolerance: self.tie_tolerance.unwrap_or(d.tie_tolerance),
            clip_rewards: self.clip_rewards.unwrap_or(d.clip_rewards),
        }
    }

    pub fn strategy(&self) -> SelectionStrategy {
        if self.random_queries {
            SelectionStrategy::Random
        } else {
            SelectionStrategy::Variance
        }
    }

    /// Labels requested from the untrained policy before RL starts. With
    /// offline queries this is the whole budget.
    pub fn initial_labels(&self) -> usize {
        if !self.uses_labels() {
            0
        } else if self.no_online_queries {
            self.label_budget
        } else {
            (self.initial_fraction * self.label_budget as f64).round() as usize
        }
    }

    pub fn label_schedule(&self) -> LabelSchedule {
        let online = self.label_budget - self.initial_labels().min(self.label_budget);
        LabelSchedule::new(
            self.schedule,
            self.anneal_constant.unwrap_or(self.total_steps as f64 / 5.0),
            self.schedule_window,
            self.initial_labels(),
            online,
            self.total_steps as f64,
        )
    }

    /// The full method followed by the six single-component ablations, all
    /// derived from this config and sharing its seed.
    pub fn ablation_variants(&self) -> Result<Vec<(&'static str, ExperimentConfig)>> {
        let mut base = self.clone();
        base.random_queries = false;
        base.no_ensemble = false;
        base.no_online_queries = false;
        base.no_regularization = false;
        base.no_segments = false;
        base.target_regression = false;
        base.segment_length = None;
        base.ensemble_size = self.ensemble_size.max(2);
        let variants: [(&'static str, fn(&mut ExperimentConfig)); 7] = [
            ("full", |_| {}),
            ("random_queries", |c| c.random_queries = true),
            ("no_ensemble", |c| c.no_ensemble = true),
            ("no_online_queries", |c| c.no_online_queries = true),
            ("no_regularization", |c| c.no_regularization = true),
            ("no_segments", |c| c.no_segments = true),
            ("target_regression", |c| c.target_regression = true),
        ];
        variants
            .into_iter()
            .map(|(name, set)| {
                let mut c = base.clone();
                set(&mut c);
                Ok((name, c.resolved()?))
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
