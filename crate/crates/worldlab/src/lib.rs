//! Desk-scale laboratory for visual model-based RL: six world-model designs,
//! cross-entropy-method planning, and online/offline experiment harnesses on
//! tiny in-repo environments.

pub mod analysis;
pub mod cli;
pub mod envs;
pub mod harness;
pub mod models;
pub mod planner;
pub mod tensor;
