//! 10×10 "catch": a ball falls one row per step and the three-cell paddle on
//! the bottom row must be under it when it lands. Row 0 is a score strip that
//! is blanked in everything a labeler or reward model sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, EnvId, EnvSpec, Environment, Frame, FrameView, HiddenReward, Observation, Primitive, Transition};
use crate::error::Result;

pub const WIDTH: usize = 10;
pub const HEIGHT: usize = 10;
pub const PADDLE_WIDTH: usize = 3;
const PADDLE_ROW: usize = HEIGHT - 1;
const SPAWN_ROW: usize = 1;
const EPISODE_LENGTH: usize = 250;

pub(super) fn spec() -> EnvSpec {
    EnvSpec {
        id: EnvId::Arcade,
        observation_dim: WIDTH * HEIGHT,
        action_space: ActionSpace::Discrete { n: 3 },
        episode_length: EPISODE_LENGTH,
        fps: 15.0,
        segment_length: 25,
        termination_penalty: 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatchState {
    pub ball_row: usize,
    pub ball_col: usize,
    /// Leftmost paddle column.
    pub paddle: usize,
    /// Running score shown in the strip: catches minus misses this episode.
    pub score: i64,
}

#[derive(Debug, Clone)]
pub struct Catch {
    spec: EnvSpec,
    state: CatchState,
    rng: ChaCha8Rng,
    episode_step: usize,
}

impl Default for Catch {
    fn default() -> Self {
        Self::new()
    }
}

impl Catch {
    pub fn new() -> Self {
        let mut env = Self {
            spec: spec(),
            state: CatchState { ball_row: SPAWN_ROW, ball_col: 0, paddle: 0, score: 0 },
            rng: ChaCha8Rng::seed_from_u64(0),
            episode_step: 0,
        };
        env.reset(0);
        env
    }

    pub fn state(&self) -> CatchState {
        self.state
    }

    pub fn set_state(&mut self, state: CatchState) {
        self.state = state;
    }

    fn sample_start(&mut self) {
        self.state = CatchState {
            ball_row: SPAWN_ROW,
            ball_col: self.rng.random_range(0..WIDTH),
            paddle: self.rng.random_range(0..=WIDTH - PADDLE_WIDTH),
            score: 0,
        };
        self.episode_step = 0;
    }

    fn score_cells(&self) -> usize {
        self.state.score.rem_euclid(WIDTH as i64 + 1) as usize
    }

    /// Full grid including the lit score strip; never handed to the agent.
    pub fn raw_grid(&self) -> Vec<f64> {
        let mut grid = self.blanked_grid();
        grid[..self.score_cells()].iter_mut().for_each(|c| *c = 1.0);
        grid
    }

    fn blanked_grid(&self) -> Vec<f64> {
        let mut grid = vec![0.0; WIDTH * HEIGHT];
        let s = self.state;
        grid[s.ball_row * WIDTH + s.ball_col] = 1.0;
        for c in s.paddle..s.paddle + PADDLE_WIDTH {
            grid[PADDLE_ROW * WIDTH + c] = 1.0;
        }
        grid
    }
}

fn cell_rect(row: usize, col: usize, cols: usize, color: [u8; 3]) -> Primitive {
    Primitive::Rect {
        x: col as f64 / WIDTH as f64,
        y: row as f64 / HEIGHT as f64,
        w: cols as f64 / WIDTH as f64,
        h: 1.0 / HEIGHT as f64,
        color,
    }
}

impl Environment for Catch {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_start();
        self.observation()
    }

    fn observation(&self) -> Observation {
        self.blanked_grid()
    }

    fn step(&mut self, action: &Action, render: bool) -> Result<(Observation, Transition)> {
        let action = self.spec.action_space.validate(action)?;
        let observation = self.observation();
        let frame = render.then(|| self.render_frame(FrameView::Labeler));
        let mv = match action {
            Action::Discrete(i) => i,
            Action::Continuous(_) => unreachable!("validated against a discrete space"),
        };

        let s = &mut self.state;
        s.paddle = match mv {
            0 => s.paddle.saturating_sub(1),
            2 => (s.paddle + 1).min(WIDTH - PADDLE_WIDTH),
            _ => s.paddle,
        };
        s.ball_row += 1;
        let mut reward = 0.0;
        if s.ball_row == PADDLE_ROW {
            let caught = (s.paddle..s.paddle + PADDLE_WIDTH).contains(&s.ball_col);
            reward = if caught { 1.0 } else { -1.0 };
            s.score += reward as i64;
            s.ball_row = SPAWN_ROW;
            s.ball_col = self.rng.random_range(0..WIDTH);
        }

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
        0.0
    }

    fn render_frame(&self, view: FrameView) -> Frame {
        let s = self.state;
        let mut prims = Vec::with_capacity(3);
        if view == FrameView::Evaluation && self.score_cells() > 0 {
            prims.push(cell_rect(0, 0, self.score_cells(), [230, 200, 60]));
        }
        prims.push(cell_rect(s.ball_row, s.ball_col, 1, [230, 70, 70]));
        prims.push(cell_rect(PADDLE_ROW, s.paddle, PADDLE_WIDTH, [230, 230, 230]));
        Frame::new(prims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RewardAudit;

    #[test]
    fn observation_has_grid_length_and_blank_strip() {
        let mut env = Catch::new();
        let obs = env.reset(0);
        assert_eq!(obs.len(), WIDTH * HEIGHT);
        assert!(obs[..WIDTH].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn landing_rewards() {
        let mut env = Catch::new();
        let mut audit = RewardAudit::default();
        env.set_state(CatchState { ball_row: PADDLE_ROW - 1, ball_col: 4, paddle: 3, score: 0 });
        let (_, t) = env.step(&Action::Discrete(1), false).unwrap();
        assert_eq!(t.true_reward.reveal(&mut audit), 1.0);
        env.set_state(CatchState { ball_row: PADDLE_ROW - 1, ball_col: 9, paddle: 0, score: 0 });
        let (_, t) = env.step(&Action::Discrete(1), false).unwrap();
        assert_eq!(t.true_reward.reveal(&mut audit), -1.0);
        env.set_state(CatchState { ball_row: 3, ball_col: 9, paddle: 0, score: 0 });
        let (_, t) = env.step(&Action::Discrete(2), false).unwrap();
        assert_eq!(t.true_reward.reveal(&mut audit), 0.0);
    }

    #[test]
    fn ball_cell_renders_as_one_rect() {
        let mut env = Catch::new();
        env.set_state(CatchState { ball_row: 2, ball_col: 3, paddle: 0, score: 4 });
        let frame = env.render_frame(FrameView::Labeler);
        assert_eq!(
            frame.primitives[0],
            Primitive::Rect { x: 0.3, y: 0.2, w: 0.1, h: 0.1, color: [230, 70, 70] }
        );
        assert_eq!(frame.primitives.len(), 2);
        // The evaluation overlay shows the score strip.
        let overlay = env.render_frame(FrameView::Evaluation);
        assert_eq!(overlay.primitives.len(), 3);
        assert_eq!(env.raw_grid()[..WIDTH].iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn no_score_leakage_over_many_steps() {
        let mut env = Catch::new();
        env.reset(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let (obs, t) = env.step(&Action::Discrete(rng.random_range(0..3)), true).unwrap();
            assert!(obs[..WIDTH].iter().all(|&c| c == 0.0));
            assert!(t.observation[..WIDTH].iter().all(|&c| c == 0.0));
            for p in &t.frame.unwrap().primitives {
                if let Primitive::Rect { y, .. } = p {
                    assert!(*y >= 1.0 / HEIGHT as f64 - 1e-12, "primitive drawn in the score strip");
                }
            }
        }
    }

    #[test]
    fn penalty_is_always_zero() {
        let mut env = Catch::new();
        for i in 0..100 {
            env.step(&Action::Discrete(i % 3), false).unwrap();
            assert_eq!(env.out_of_range_penalty(), 0.0);
        }
    }
}
