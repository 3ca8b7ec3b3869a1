//! Cross-entropy-method trajectory optimization and the model-predictive
//! control loop built on it: replan from the current belief every step,
//! execute only the first planned action.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::envs::Env;
use crate::harness::{Episode, Mode};
use crate::models::{Context, ModelError, Sequence, WorldModel};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("{0}")]
    BadParams(&'static str),
    #[error("planner horizon {planner} does not match the model's rollout horizon {model}")]
    HorizonMismatch { planner: usize, model: usize },
    #[error("model was built for {model}, environment runs {env}")]
    TaskMismatch { model: &'static str, env: &'static str },
    #[error("candidate {index} scored a non-finite return {value}")]
    NonFiniteReturn { index: usize, value: f64 },
    #[error("returns_fn scored {got} candidates, expected {want}")]
    WrongReturnCount { want: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Search distribution settings. Defaults: horizon 12, 10 refit iterations,
/// 128 candidates per iteration, 12 elites.
#[derive(Debug, Clone, PartialEq)]
pub struct CemParams {
    pub horizon: usize,
    pub iterations: usize,
    pub candidates: usize,
    pub elites: usize,
    /// Stddev of the initial zero-mean search distribution.
    pub init_stddev: f64,
    /// Per-element lower clamp applied after each refit so the search never
    /// collapses to a point.
    pub stddev_floor: f64,
}

impl Default for CemParams {
    fn default() -> Self {
        Self {
            horizon: 12,
            iterations: 10,
            candidates: 128,
            elites: 12,
            init_stddev: 1.0,
            stddev_floor: 0.01,
        }
    }
}

impl CemParams {
    pub fn check(&self) -> Result<(), PlannerError> {
        if self.horizon < 1 {
            return Err(PlannerError::BadParams("horizon must be at least 1"));
        }
        if self.iterations < 1 {
            return Err(PlannerError::BadParams("iterations must be at least 1"));
        }
        if self.candidates < 1 {
            return Err(PlannerError::BadParams("need at least one candidate"));
        }
        if self.elites < 1 || self.elites > self.candidates {
            return Err(PlannerError::BadParams("elites must be in 1..=candidates"));
        }
        if !(self.init_stddev > 0.0) {
            return Err(PlannerError::BadParams("init_stddev must be positive"));
        }
        if !(self.stddev_floor >= 0.0) {
            return Err(PlannerError::BadParams("stddev_floor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Chosen action sequence, `horizon` rows of `action_dim`, all in [-1, 1].
    pub actions: Vec<Vec<f64>>,
    /// Final search distribution over the flattened sequence.
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    /// Best candidate return seen in each iteration.
    pub best_returns: Vec<f64>,
}

/// Iteratively refits a diagonal Gaussian over flattened action sequences to
/// the `elites` best of `candidates` samples. The best sequence found so far
/// re-enters the next pool, so elite quality never regresses under a
/// deterministic objective. Returns the final mean, clamped to the action
/// box. Ties rank by lower candidate index.
pub fn cem_plan<F>(
    mut returns_fn: F,
    action_dim: usize,
    params: &CemParams,
    rng: &mut ChaCha8Rng,
) -> Result<PlanResult, PlannerError>
where
    F: FnMut(&[Vec<Vec<f64>>]) -> Result<Vec<f64>, PlannerError>,
{
    params.check()?;
    if action_dim == 0 {
        return Err(PlannerError::BadParams("action_dim must be at least 1"));
    }
    let flat = params.horizon * action_dim;
    let mut mean = vec![0.0; flat];
    let mut stddev = vec![params.init_stddev; flat];
    let mut carry: Option<Vec<f64>> = None;
    let mut best_returns = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let mut cands: Vec<Vec<f64>> = Vec::with_capacity(params.candidates);
        if let Some(c) = &carry {
            cands.push(c.clone());
        }
        while cands.len() < params.candidates {
            cands.push(
                mean.iter()
                    .zip(&stddev)
                    .map(|(m, s)| {
                        let n: f64 = rng.sample(StandardNormal);
                        (m + s * n).clamp(-1.0, 1.0)
                    })
                    .collect(),
            );
        }
        let shaped: Vec<Vec<Vec<f64>>> = cands.iter().map(|c| unflatten(c, action_dim)).collect();
        let returns = returns_fn(&shaped)?;
        if returns.len() != cands.len() {
            return Err(PlannerError::WrongReturnCount { want: cands.len(), got: returns.len() });
        }
        if let Some((i, &v)) = returns.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(PlannerError::NonFiniteReturn { index: i, value: v });
        }
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_unstable_by(|&a, &b| returns[b].partial_cmp(&returns[a]).unwrap().then(a.cmp(&b)));
        let elites = &order[..params.elites];
        best_returns.push(returns[elites[0]]);
        carry = Some(cands[elites[0]].clone());
        let k = params.elites as f64;
        for j in 0..flat {
            let m = elites.iter().map(|&i| cands[i][j]).sum::<f64>() / k;
            let var = elites.iter().map(|&i| (cands[i][j] - m).powi(2)).sum::<f64>() / k;
            mean[j] = m;
            stddev[j] = var.sqrt().max(params.stddev_floor);
        }
    }
    let clamped: Vec<f64> = mean.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let actions = unflatten(&clamped, action_dim);
    Ok(PlanResult { actions, mean, stddev, best_returns })
}

fn unflatten(flat: &[f64], action_dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(action_dim).map(|c| c.to_vec()).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs one full episode of model-predictive control. Until the model has a
/// full context the agent acts uniformly at random; afterwards each step
/// filters a belief from the running history, plans, and executes the first
/// planned action. Train mode adds clipped Gaussian exploration noise of the
/// given stddev to the executed action; eval mode runs the plan untouched.
pub fn mpc_episode(
    env: &Env,
    model: &WorldModel,
    params: &CemParams,
    noise_stddev: f64,
    mode: Mode,
    seed: u64,
) -> Result<Episode, PlannerError> {
    params.check()?;
    let mcfg = model.config();
    if mcfg.task != env.task {
        return Err(PlannerError::TaskMismatch { model: mcfg.task.id(), env: env.task.id() });
    }
    if params.horizon != mcfg.prediction_horizon {
        return Err(PlannerError::HorizonMismatch {
            planner: params.horizon,
            model: mcfg.prediction_horizon,
        });
    }
    let adim = env.task.action_dim();
    let mut plan_rng = stream_rng(seed, 1);
    let mut model_rng = stream_rng(seed, 2);
    let mut noise_rng = stream_rng(seed, 3);

    let (mut state, obs) = env.reset(seed);
    let mut seq = Sequence {
        observations: vec![obs.image],
        actions: Vec::new(),
        rewards: vec![0.0],
        states: vec![state.clone()],
    };
    let mut step_seconds = Vec::new();
    let mut truncated = false;
    let steps = env.episode_steps as usize;
    while seq.steps() < steps {
        let t0 = Instant::now();
        let action = if seq.observations.len() < mcfg.context_length {
            (0..adim).map(|_| plan_rng.gen_range(-1.0..=1.0)).collect::<Vec<f64>>()
        } else {
            let ctx = Context::from_sequence_tail(&seq, mcfg.context_length);
            let belief = model.observe_context(&ctx)?;
            let plan = cem_plan(
                |cands| model.imagine_returns(&belief, cands, &mut model_rng).map_err(PlannerError::from),
                adim,
                params,
                &mut plan_rng,
            )?;
            let mut action = plan.actions.into_iter().next().expect("horizon is at least 1");
            if mode == Mode::Train && noise_stddev > 0.0 {
                for a in &mut action {
                    let n: f64 = noise_rng.sample(StandardNormal);
                    *a = (*a + noise_stddev * n).clamp(-1.0, 1.0);
                }
            }
            action
        };
        let result = env.step_repeated(&mut state, &action, mcfg.action_repeat);
        seq.observations.push(result.observation.image);
        seq.actions.push(action);
        seq.rewards.push(result.reward);
        seq.states.push(state.clone());
        step_seconds.push(t0.elapsed().as_secs_f64());
        if result.done {
            truncated = seq.steps() < steps;
            break;
        }
    }
    Ok(Episode { task: env.task, seed, mode, sequence: seq, step_seconds, truncated })
}
