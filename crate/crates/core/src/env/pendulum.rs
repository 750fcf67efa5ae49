//! Torque-limited pendulum swing-up. `θ = 0` is upright.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, EnvId, EnvSpec, Environment, Frame, FrameView, HiddenReward, Observation, Primitive, Transition};
use crate::error::Result;

const GRAVITY: f64 = 10.0;
const LENGTH: f64 = 1.0;
const DT: f64 = 0.05;
pub const MAX_TORQUE: f64 = 2.0;
const TORQUE_COST: f64 = 0.001;
/// Angular speeds above this are outside the safe range and draw the penalty.
pub const SAFE_SPEED: f64 = 8.0;
/// Hard integration limit on angular speed.
const SPEED_LIMIT: f64 = 16.0;
const EPISODE_LENGTH: usize = 200;

/// Rod length in frame coordinates.
pub const ROD_LENGTH: f64 = 0.4;

pub(super) fn spec() -> EnvSpec {
    EnvSpec {
        id: EnvId::Pendulum,
        observation_dim: 3,
        action_space: ActionSpace::Continuous { dim: 1, low: -MAX_TORQUE, high: MAX_TORQUE },
        episode_length: EPISODE_LENGTH,
        fps: 15.0,
        segment_length: 25,
        termination_penalty: 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    state: PendulumState,
    rng: ChaCha8Rng,
    episode_step: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        let mut env = Self {
            spec: spec(),
            state: PendulumState { theta: PI, theta_dot: 0.0 },
            rng: ChaCha8Rng::seed_from_u64(0),
            episode_step: 0,
        };
        env.reset(0);
        env
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    /// Places the pendulum in an exact state; the episode clock is not touched.
    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
    }

    /// Reward for acting with `torque` from `state`, penalty included.
    pub fn true_reward(&self, state: PendulumState, torque: f64) -> f64 {
        state.theta.cos() - TORQUE_COST * torque * torque + self.penalty_at(state)
    }

    fn penalty_at(&self, state: PendulumState) -> f64 {
        if state.theta_dot.abs() > SAFE_SPEED {
            -self.spec.termination_penalty
        } else {
            0.0
        }
    }

    fn sample_start(&mut self) {
        self.state = PendulumState {
            theta: self.rng.random_range(-PI..PI),
            theta_dot: self.rng.random_range(-1.0..1.0),
        };
        self.episode_step = 0;
    }
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_start();
        self.observation()
    }

    fn observation(&self) -> Observation {
        vec![self.state.theta.cos(), self.state.theta.sin(), self.state.theta_dot]
    }

    fn step(&mut self, action: &Action, render: bool) -> Result<(Observation, Transition)> {
        let action = self.spec.action_space.validate(action)?;
        let torque = match &action {
            Action::Continuous(v) => v[0],
            Action::Discrete(_) => unreachable!("validated against a continuous space"),
        };
        let observation = self.observation();
        let reward = self.true_reward(self.state, torque);
        let frame = render.then(|| self.render_frame(FrameView::Labeler));

        let PendulumState { theta, theta_dot } = self.state;
        let accel = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 / (LENGTH * LENGTH) * torque;
        let theta_dot = (theta_dot + accel * DT).clamp(-SPEED_LIMIT, SPEED_LIMIT);
        self.state = PendulumState {
            theta: wrap_angle(theta + theta_dot * DT),
            theta_dot,
        };

        self.episode_step += 1;
        let episode_end = self.episode_step == self.spec.episode_length;
        if episode_end {
            self.sample_start();
        }
        let transition = Transition {
            observation,
            action,
            true_reward: HiddenReward::new(reward),
            frame,
            episode_end,
        };
        Ok((self.observation(), transition))
    }

    fn out_of_range_penalty(&self) -> f64 {
        self.penalty_at(self.state)
    }

    fn render_frame(&self, _view: FrameView) -> Frame {
        let (pivot_x, pivot_y) = (0.5, 0.5);
        let tip_x = pivot_x + ROD_LENGTH * self.state.theta.sin();
        let tip_y = pivot_y - ROD_LENGTH * self.state.theta.cos();
        Frame::new(vec![
            Primitive::Line { x1: pivot_x, y1: pivot_y, x2: tip_x, y2: tip_y, width: 0.04, color: [204, 77, 77] },
            Primitive::Circle { cx: tip_x, cy: tip_y, r: 0.03, color: [204, 77, 77] },
            Primitive::Circle { cx: pivot_x, cy: pivot_y, r: 0.015, color: [40, 40, 40] },
        ])
    }
}
