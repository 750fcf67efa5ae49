//! Deterministic-given-seed environments with hidden true rewards.
//!
//! Episodes have a fixed length. At the boundary an environment resets itself
//! from its own seeded RNG and keeps going; agents only ever see one
//! continuous stream of observations.

mod catch;
mod frame;
mod pendulum;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use catch::{Catch, CatchState};
pub use frame::{Frame, Primitive, Rgb};
pub use pendulum::{Pendulum, PendulumState};

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Pendulum,
    Arcade,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::Pendulum => "pendulum",
            EnvId::Arcade => "arcade",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::Pendulum => pendulum::spec(),
            EnvId::Arcade => catch::spec(),
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvId::Pendulum),
            "arcade" => Ok(EnvId::Arcade),
            other => Err(Error::config(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { dim: usize, low: f64, high: f64 },
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the action's encoding as reward-model input.
    pub fn feature_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim, .. } => dim,
            ActionSpace::Discrete { n } => n,
        }
    }

    /// Checks the action against the space and clips continuous components to bounds.
    pub fn validate(&self, action: &Action) -> Result<Action> {
        match (self, action) {
            (ActionSpace::Continuous { dim, low, high }, Action::Continuous(v)) => {
                if v.len() != *dim {
                    return Err(Error::contract(format!("action has {} components, expected {dim}", v.len())));
                }
                if v.iter().any(|x| x.is_nan()) {
                    return Err(Error::contract("NaN action component"));
                }
                Ok(Action::Continuous(v.iter().map(|x| x.clamp(*low, *high)).collect()))
            }
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                if *i >= *n {
                    return Err(Error::contract(format!("action index {i} outside [0, {n})")));
                }
                Ok(action.clone())
            }
            _ => Err(Error::contract("action kind does not match the action space")),
        }
    }

    /// Appends the reward-model encoding of `action`: raw components or a one-hot vector.
    pub fn encode_into(&self, action: &Action, out: &mut Vec<f64>) {
        match (self, action) {
            (ActionSpace::Continuous { .. }, Action::Continuous(v)) => out.extend_from_slice(v),
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                out.extend((0..*n).map(|j| if j == *i { 1.0 } else { 0.0 }));
            }
            _ => panic!("action kind does not match the action space"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub episode_length: usize,
    pub fps: f64,
    pub segment_length: usize,
    pub termination_penalty: f64,
}

impl EnvSpec {
    pub fn feature_dim(&self) -> usize {
        self.observation_dim + self.action_space.feature_dim()
    }
}

/// Tally of true-reward reads by one consumer.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RewardAudit {
    pub reads: u64,
}

/// A true reward value that can only be read through a [`RewardAudit`], so
/// every consumer's access is counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenReward(f64);

impl HiddenReward {
    pub(crate) fn new(value: f64) -> Self {
        HiddenReward(value)
    }

    pub fn reveal(&self, audit: &mut RewardAudit) -> f64 {
        audit.reads += 1;
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    /// Observation the action was taken from.
    pub observation: Observation,
    /// Action as executed (continuous components already clipped).
    pub action: Action,
    pub true_reward: HiddenReward,
    pub frame: Option<Frame>,
    /// Evaluation bookkeeping only: set on the last step before an internal reset.
    pub episode_end: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameView {
    /// What labelers see: score information blanked.
    Labeler,
    /// Overlay variant used for evaluation displays.
    Evaluation,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Reseeds and restarts. Identical seeds give identical evolutions under identical actions.
    fn reset(&mut self, seed: u64) -> Observation;

    fn observation(&self) -> Observation;

    /// Advances one step. `render` attaches a labeler-view frame of the pre-step state.
    fn step(&mut self, action: &Action, render: bool) -> Result<(Observation, Transition)>;

    /// Zero inside the safe region, `-termination_penalty` outside.
    fn out_of_range_penalty(&self) -> f64;

    fn render_frame(&self, view: FrameView) -> Frame;
}

pub fn make_env(id: EnvId) -> Box<dyn Environment> {
    match id {
        EnvId::Pendulum => Box::new(Pendulum::new()),
        EnvId::Arcade => Box::new(Catch::new()),
    }
}

/// Resolves an environment by name, for configuration and CLI input.
pub fn make_env_by_name(name: &str) -> Result<Box<dyn Environment>> {
    Ok(make_env(name.parse()?))
}
