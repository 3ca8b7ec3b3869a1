//! Tiny pixel-observed control tasks. Three tasks cover the axes that matter
//! here: dense long-horizon reward, sparse reward, and a cart that can leave
//! the camera's view. All physics is f64, fixed-step, and deterministic.

mod render;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const DT: f64 = 0.05;
pub const DEFAULT_IMAGE_SIZE: usize = 16;
pub const DEFAULT_EPISODE_STEPS: u32 = 100;
pub const DEFAULT_ACTION_REPEAT: u32 = 4;

const PENDULUM_G_OVER_L: f64 = 9.8;
const PENDULUM_TORQUE: f64 = 2.5;
const REACHER_ACCEL: f64 = 1.0;
const REACHER_GOAL_RADIUS: f64 = 0.1;
const CARTPOLE_G: f64 = 9.8;
const CARTPOLE_POLE_LEN: f64 = 0.6;
const CARTPOLE_FORCE: f64 = 4.0;
const CARTPOLE_X_LIMIT: f64 = 2.5;
const CARTPOLE_THETA_LIMIT: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    PendulumSwingup,
    PointReacherSparse,
    CartpoleBalance,
}

impl Task {
    pub fn parse(id: &str) -> Result<Self, EnvError> {
        match id {
            "pendulum_swingup" => Ok(Self::PendulumSwingup),
            "point_reacher_sparse" => Ok(Self::PointReacherSparse),
            "cartpole_balance" => Ok(Self::CartpoleBalance),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::PendulumSwingup => "pendulum_swingup",
            Self::PointReacherSparse => "point_reacher_sparse",
            Self::CartpoleBalance => "cartpole_balance",
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Self::PointReacherSparse => 2,
            _ => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::PendulumSwingup => 2,
            Self::PointReacherSparse => 6,
            Self::CartpoleBalance => 4,
        }
    }

    pub fn all() -> [Task; 3] {
        [
            Self::PendulumSwingup,
            Self::PointReacherSparse,
            Self::CartpoleBalance,
        ]
    }
}

/// Full simulator state. For the reacher the target cell rides along in the
/// physical vector (last two entries) so a state is self-contained.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task: Task,
    pub phys: Vec<f64>,
    pub frame: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[size, size, 3]`, every channel in [0,1].
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    /// Sum of per-frame rewards over the repeated frames, in [0, repeat].
    pub reward: f64,
    pub done: bool,
}

/// One task plus rendering and episode configuration. Cloning shares the
/// interaction counter; states themselves are plain values, so independent
/// rollouts just clone the state.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: Task,
    pub image_size: usize,
    pub episode_steps: u32,
    frames_stepped: Arc<AtomicU64>,
}

impl Env {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            image_size: DEFAULT_IMAGE_SIZE,
            episode_steps: DEFAULT_EPISODE_STEPS,
            frames_stepped: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn with_episode_steps(mut self, steps: u32) -> Self {
        self.episode_steps = steps;
        self
    }

    /// Physics frames advanced through `step_repeated` since construction.
    /// Planning queries through `oracle_returns` do not count; this tracks
    /// real agent-environment interaction only.
    pub fn frames_stepped(&self) -> u64 {
        self.frames_stepped.load(Ordering::Relaxed)
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phys = match self.task {
            Task::PendulumSwingup => {
                let theta = std::f64::consts::PI + rng.gen_range(-0.1..0.1);
                let vel = rng.gen_range(-0.05..0.05);
                vec![theta, vel]
            }
            Task::PointReacherSparse => {
                let tx = rng.gen_range(0.1..0.9);
                let ty = rng.gen_range(0.1..0.9);
                vec![0.5, 0.5, 0.0, 0.0, tx, ty]
            }
            Task::CartpoleBalance => {
                let x = rng.gen_range(-0.2..0.2);
                let theta = rng.gen_range(-0.05..0.05);
                let theta_dot = rng.gen_range(-0.05..0.05);
                vec![x, 0.0, theta, theta_dot]
            }
        };
        let state = EnvState { task: self.task, phys, frame: 0 };
        let obs = self.render(&state);
        (state, obs)
    }

    /// Advances `repeat` physics frames under one action and returns the
    /// final frame's rendering plus the summed per-frame reward. Out-of-range
    /// action components are clamped, matching what the planner does.
    pub fn step_repeated(&self, state: &mut EnvState, action: &[f64], repeat: u32) -> StepResult {
        assert!(repeat >= 1, "repeat must be at least 1");
        assert_eq!(
            action.len(),
            self.task.action_dim(),
            "action dimension for {}",
            self.task.id()
        );
        let action = clamp_action(action);
        let mut reward = 0.0;
        for _ in 0..repeat {
            advance_frame(self.task, &mut state.phys, &action);
            state.frame += 1;
            reward += frame_reward(self.task, &state.phys);
        }
        self.frames_stepped.fetch_add(repeat as u64, Ordering::Relaxed);
        let done = state.frame >= self.episode_steps * repeat;
        StepResult { observation: self.render(state), reward, done }
    }

    pub fn render(&self, state: &EnvState) -> Observation {
        Observation { image: render::rasterize(state, self.image_size) }
    }

    /// Per-frame reward of the current state, in [0,1].
    pub fn frame_reward(&self, state: &EnvState) -> f64 {
        frame_reward(self.task, &state.phys)
    }

    /// True-simulator returns: each action sequence is rolled from a copy of
    /// `state` and its step rewards are summed. The caller's state is never
    /// touched and nothing here counts as agent interaction.
    pub fn oracle_returns(
        &self,
        state: &EnvState,
        sequences: &[Vec<Vec<f64>>],
        repeat: u32,
    ) -> Vec<f64> {
        sequences
            .iter()
            .map(|seq| {
                let mut phys = state.phys.clone();
                let mut total = 0.0;
                for action in seq {
                    let action = clamp_action(action);
                    for _ in 0..repeat {
                        advance_frame(self.task, &mut phys, &action);
                        total += frame_reward(self.task, &phys);
                    }
                }
                total
            })
            .collect()
    }
}

fn clamp_action(action: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(action.len());
    for &a in action {
        if !(-1.0..=1.0).contains(&a) {
            log::warn!("action component {a} outside [-1,1], clamping");
        }
        out.push(a.clamp(-1.0, 1.0));
    }
    out
}

/// One semi-implicit Euler frame of the task's dynamics.
fn advance_frame(task: Task, phys: &mut [f64], action: &[f64]) {
    match task {
        Task::PendulumSwingup => {
            let (theta, vel) = (phys[0], phys[1]);
            let accel = -PENDULUM_G_OVER_L * theta.sin() + action[0] * PENDULUM_TORQUE;
            let vel = vel + DT * accel;
            phys[1] = vel;
            phys[0] = theta + DT * vel;
        }
        Task::PointReacherSparse => {
            for axis in 0..2 {
                let vel = phys[2 + axis] + DT * action[axis] * REACHER_ACCEL;
                let mut pos = phys[axis] + DT * vel;
                let mut vel = vel;
                if pos < 0.0 {
                    pos = 0.0;
                    vel = 0.0;
                } else if pos > 1.0 {
                    pos = 1.0;
                    vel = 0.0;
                }
                phys[axis] = pos;
                phys[2 + axis] = vel;
            }
        }
        Task::CartpoleBalance => {
            let (x, x_dot, theta, theta_dot) = (phys[0], phys[1], phys[2], phys[3]);
            let x_acc = action[0] * CARTPOLE_FORCE;
            let theta_acc = (CARTPOLE_G * theta - x_acc) / CARTPOLE_POLE_LEN;

            let mut x_dot = x_dot + DT * x_acc;
            let mut x = x + DT * x_dot;
            if x.abs() > CARTPOLE_X_LIMIT {
                x = x.clamp(-CARTPOLE_X_LIMIT, CARTPOLE_X_LIMIT);
                x_dot = 0.0;
            }
            let mut theta_dot = theta_dot + DT * theta_acc;
            let mut theta = theta + DT * theta_dot;
            // the pole rests against a hard stop once it falls over
            if theta.abs() > CARTPOLE_THETA_LIMIT {
                theta = theta.clamp(-CARTPOLE_THETA_LIMIT, CARTPOLE_THETA_LIMIT);
                theta_dot = 0.0;
            }
            phys[0] = x;
            phys[1] = x_dot;
            phys[2] = theta;
            phys[3] = theta_dot;
        }
    }
}

fn frame_reward(task: Task, phys: &[f64]) -> f64 {
    match task {
        Task::PendulumSwingup => (1.0 + phys[0].cos()) / 2.0,
        Task::PointReacherSparse => {
            let dx = phys[0] - phys[4];
            let dy = phys[1] - phys[5];
            if (dx * dx + dy * dy).sqrt() < REACHER_GOAL_RADIUS {
                1.0
            } else {
                0.0
            }
        }
        Task::CartpoleBalance => {
            if phys[2].abs() < 0.2 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(obs: &Observation) -> Vec<u64> {
        obs.image.data.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn reset_is_deterministic() {
        for task in Task::all() {
            let env = Env::new(task);
            let (s1, o1) = env.reset(42);
            let (s2, o2) = env.reset(42);
            assert_eq!(s1, s2);
            assert_eq!(bits(&o1), bits(&o2), "{}", task.id());
        }
    }

    #[test]
    fn pendulum_resets_near_hanging() {
        let env = Env::new(Task::PendulumSwingup);
        for seed in 0..50 {
            let (state, _) = env.reset(seed);
            assert!((state.phys[0] - std::f64::consts::PI).abs() <= 0.1);
        }
    }

    #[test]
    fn reacher_targets_vary_with_seed() {
        let env = Env::new(Task::PointReacherSparse);
        let targets: Vec<(f64, f64)> = (0..10)
            .map(|seed| {
                let (s, _) = env.reset(seed);
                (s.phys[4], s.phys[5])
            })
            .collect();
        let distinct = targets
            .iter()
            .any(|&t| t != targets[0]);
        assert!(distinct, "all targets identical across seeds");
        for &(tx, ty) in &targets {
            assert!((0.1..0.9).contains(&tx) && (0.1..0.9).contains(&ty));
        }
    }

    #[test]
    fn upright_pendulum_with_zero_torque_earns_four() {
        let env = Env::new(Task::PendulumSwingup);
        let mut state = EnvState {
            task: Task::PendulumSwingup,
            phys: vec![0.0, 0.0],
            frame: 0,
        };
        let r = env.step_repeated(&mut state, &[0.0], 4);
        assert_eq!(r.reward, 4.0);
    }

    #[test]
    fn repeat_composes_like_single_frames() {
        for task in Task::all() {
            let env = Env::new(task);
            let (mut a, _) = env.reset(7);
            let (mut b, _) = env.reset(7);
            let action: Vec<f64> = vec![0.3; task.action_dim()];
            let ra = env.step_repeated(&mut a, &action, 2);
            let r1 = env.step_repeated(&mut b, &action, 1);
            let r2 = env.step_repeated(&mut b, &action, 1);
            assert_eq!(a.phys, b.phys, "{}", task.id());
            assert_eq!(ra.reward, r1.reward + r2.reward);
        }
    }

    #[test]
    fn physics_is_deterministic() {
        for task in Task::all() {
            let env = Env::new(task);
            let (mut a, _) = env.reset(3);
            let mut b = a.clone();
            let action: Vec<f64> = vec![-0.8; task.action_dim()];
            env.step_repeated(&mut a, &action, 4);
            env.step_repeated(&mut b, &action, 4);
            let pa: Vec<u64> = a.phys.iter().map(|v| v.to_bits()).collect();
            let pb: Vec<u64> = b.phys.iter().map(|v| v.to_bits()).collect();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn out_of_range_actions_are_clamped() {
        let env = Env::new(Task::PendulumSwingup);
        let (mut a, _) = env.reset(5);
        let mut b = a.clone();
        env.step_repeated(&mut a, &[7.0], 4);
        env.step_repeated(&mut b, &[1.0], 4);
        assert_eq!(a.phys, b.phys);
    }

    #[test]
    fn render_is_deterministic_and_pose_sensitive() {
        let env = Env::new(Task::PendulumSwingup);
        let up = EnvState { task: Task::PendulumSwingup, phys: vec![0.0, 0.0], frame: 0 };
        let down = EnvState {
            task: Task::PendulumSwingup,
            phys: vec![std::f64::consts::PI, 0.0],
            frame: 0,
        };
        assert_eq!(bits(&env.render(&up)), bits(&env.render(&up)));
        let a = env.render(&up);
        let b = env.render(&down);
        let differing = a
            .image
            .data
            .chunks(3)
            .zip(b.image.data.chunks(3))
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing > 5, "only {differing} pixels differ");
    }

    #[test]
    fn cartpole_out_of_view_renders_background_only() {
        let env = Env::new(Task::CartpoleBalance);
        let far_left = EnvState {
            task: Task::CartpoleBalance,
            phys: vec![-2.5, 0.0, 0.1, 0.0],
            frame: 0,
        };
        let far_right = EnvState {
            task: Task::CartpoleBalance,
            phys: vec![2.5, 0.0, -0.3, 0.0],
            frame: 0,
        };
        let centered = EnvState {
            task: Task::CartpoleBalance,
            phys: vec![0.0, 0.0, 0.0, 0.0],
            frame: 0,
        };
        assert_eq!(bits(&env.render(&far_left)), bits(&env.render(&far_right)));
        assert_ne!(bits(&env.render(&far_left)), bits(&env.render(&centered)));
    }

    #[test]
    fn oracle_zero_horizon_returns_zero() {
        let env = Env::new(Task::PendulumSwingup);
        let (state, _) = env.reset(1);
        let returns = env.oracle_returns(&state, &[vec![]], 4);
        assert_eq!(returns, vec![0.0]);
    }

    #[test]
    fn oracle_single_sequence_matches_replay() {
        let env = Env::new(Task::PointReacherSparse);
        let (state, _) = env.reset(11);
        let seq = vec![vec![0.5, -0.3], vec![-1.0, 1.0], vec![0.2, 0.2]];
        let oracle = env.oracle_returns(&state, &[seq.clone()], 4)[0];

        let mut replay = state.clone();
        let mut total = 0.0;
        for action in &seq {
            total += env.step_repeated(&mut replay, action, 4).reward;
        }
        assert_eq!(oracle.to_bits(), total.to_bits());
    }

    #[test]
    fn oracle_does_not_mutate_state_and_max_dominates_mean() {
        use rand::Rng;
        let env = Env::new(Task::PendulumSwingup);
        let (state, _) = env.reset(23);
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs: Vec<Vec<Vec<f64>>> = (0..128)
            .map(|_| (0..12).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect())
            .collect();
        let returns = env.oracle_returns(&state, &seqs, 4);
        assert_eq!(state, before);
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        assert!(max >= mean);
    }

    #[test]
    fn interaction_counter_tracks_frames_not_planning() {
        let env = Env::new(Task::PendulumSwingup);
        let (mut state, _) = env.reset(0);
        assert_eq!(env.frames_stepped(), 0);
        env.step_repeated(&mut state, &[0.1], 4);
        assert_eq!(env.frames_stepped(), 4);
        env.oracle_returns(&state, &[vec![vec![0.5]; 12]], 4);
        assert_eq!(env.frames_stepped(), 4);
        let shared = env.clone();
        shared.step_repeated(&mut state, &[0.1], 1);
        assert_eq!(env.frames_stepped(), 5);
    }

    #[test]
    fn done_fires_only_at_episode_end() {
        let env = Env::new(Task::CartpoleBalance).with_episode_steps(5);
        let (mut state, _) = env.reset(2);
        for step in 1..=5 {
            let r = env.step_repeated(&mut state, &[0.0], 4);
            assert_eq!(r.done, step == 5);
        }
    }

    proptest! {
        #[test]
        fn per_frame_reward_stays_in_unit_interval(
            seed in 0u64..200,
            actions in proptest::collection::vec(-1.0f64..1.0, 1..30),
            task_idx in 0usize..3,
        ) {
            let task = Task::all()[task_idx];
            let env = Env::new(task);
            let (mut state, _) = env.reset(seed);
            for a in &actions {
                let action = vec![*a; task.action_dim()];
                let r = env.step_repeated(&mut state, &action, 1);
                prop_assert!((0.0..=1.0).contains(&r.reward));
                prop_assert!(state.phys.iter().all(|v| v.is_finite()));
            }
        }
    }
}
