//! Six world-model designs behind one interface: train on batches of
//! sub-sequences, filter a belief from recent context, and score candidate
//! action plans by predicted return. The taxonomy axes are where dynamics
//! live (latent vector vs pixel space) and what the reward head reads
//! (latent state vs predicted frame), plus reward-only and true-simulator
//! baselines.

mod frame;
mod latent;
mod mask;
mod metrics;
mod oracle;
mod reward;

pub use mask::{apply_loss_mask, area_average, LossMaskSpec};
pub use metrics::median;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::envs::{EnvState, Task};
use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, Gradients, Graph, ParamSet, Tensor,
    TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid scale level {level} for {design}")]
    InvalidScaleLevel { design: &'static str, level: u32 },
    #[error("{design} needs an image size divisible by {multiple}, got {size}")]
    UnsupportedImageSize { design: &'static str, multiple: usize, size: usize },
    #[error("unknown design `{0}`")]
    UnknownDesign(String),
    #[error("loss mask fraction {0} outside (0, 1]")]
    InvalidMaskFraction(f64),
    #[error("resize mask side {side} does not divide image size {image}")]
    UnsupportedResize { side: usize, image: usize },
    #[error("sequence has {found} observations, need exactly {need}")]
    WrongSequenceLength { need: usize, found: usize },
    #[error("context has {found} observations, need at least {need}")]
    ContextTooShort { need: usize, found: usize },
    #[error("candidate horizon {found} does not match model horizon {need}")]
    HorizonMismatch { need: usize, found: usize },
    #[error("this design plans from the true simulator state, which the context did not carry")]
    MissingSimulatorState,
    #[error("belief was produced by a different design")]
    WrongBelief,
    #[error("checkpoint does not fit this architecture: {0}")]
    CheckpointMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardVariant {
    Recurrent,
    Conv,
    LatentNoImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelDesign {
    R(RewardVariant),
    Otor,
    Otlr,
    Ltlr,
    Ltor,
    Oracle,
}

impl ModelDesign {
    pub fn parse(id: &str) -> Result<Self, ModelError> {
        match id {
            "r" | "r_recurrent" => Ok(Self::R(RewardVariant::Recurrent)),
            "r_conv" => Ok(Self::R(RewardVariant::Conv)),
            "r_latent" | "r_latent_no_image" => Ok(Self::R(RewardVariant::LatentNoImage)),
            "otor" => Ok(Self::Otor),
            "otlr" => Ok(Self::Otlr),
            "ltlr" => Ok(Self::Ltlr),
            "ltor" => Ok(Self::Ltor),
            "oracle" => Ok(Self::Oracle),
            other => Err(ModelError::UnknownDesign(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Self::R(RewardVariant::Recurrent) => "r_recurrent",
            Self::R(RewardVariant::Conv) => "r_conv",
            Self::R(RewardVariant::LatentNoImage) => "r_latent",
            Self::Otor => "otor",
            Self::Otlr => "otlr",
            Self::Ltlr => "ltlr",
            Self::Ltor => "ltor",
            Self::Oracle => "oracle",
        }
    }

    /// Designs whose training loss includes a pixel term.
    pub fn predicts_images(&self) -> bool {
        matches!(self, Self::Otor | Self::Otlr | Self::Ltlr | Self::Ltor)
    }

    pub fn all_ids() -> [&'static str; 8] {
        [
            "r_recurrent",
            "r_conv",
            "r_latent",
            "otor",
            "otlr",
            "ltlr",
            "ltor",
            "oracle",
        ]
    }
}

/// Everything needed to size and wire a model. Defaults come from
/// `ModelConfig::new`; the per-design reward multiplier and sharing flag can
/// be overridden afterwards.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub design: ModelDesign,
    pub task: Task,
    pub image_size: usize,
    /// 0 selects the desk default sizes; higher levels pick rows of the
    /// capacity tables (1..=9 for latent dynamics, 1..=6 for frame dynamics).
    pub scale_level: u32,
    /// Whether reward-loss gradients may flow back into the shared trunk.
    pub latent_sharing: bool,
    pub loss_mask: LossMaskSpec,
    pub reward_loss_multiplier: f64,
    /// Weight of the frame models' KL term.
    pub beta: f64,
    /// Lower clamp on the latent models' per-step KL.
    pub free_nats: f64,
    pub context_length: usize,
    pub prediction_horizon: usize,
    /// Frames the simulator advances per agent action; the simulator-backed
    /// design needs it to score candidates like everyone else.
    pub action_repeat: u32,
}

impl ModelConfig {
    pub fn new(design: ModelDesign, task: Task) -> Self {
        let latent_family = matches!(
            design,
            ModelDesign::Ltlr | ModelDesign::Ltor | ModelDesign::R(RewardVariant::LatentNoImage)
        );
        Self {
            design,
            task,
            image_size: crate::envs::DEFAULT_IMAGE_SIZE,
            scale_level: 0,
            latent_sharing: latent_family,
            loss_mask: LossMaskSpec::None,
            reward_loss_multiplier: if latent_family { 10.0 } else { 1.0 },
            beta: 1e-3,
            free_nats: 3.0,
            context_length: 2,
            prediction_horizon: 12,
            action_repeat: crate::envs::DEFAULT_ACTION_REPEAT,
        }
    }

    pub fn sequence_length(&self) -> usize {
        self.context_length + self.prediction_horizon
    }
}

/// Ordered record of an interaction: N steps give N+1 observations, N
/// actions, and N+1 rewards with `rewards[0] = 0`. Simulator states ride
/// along when known so simulator-backed evaluation can replay windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sequence {
    pub observations: Vec<Tensor>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub states: Vec<EnvState>,
}

impl Sequence {
    /// Number of transitions.
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn check(&self) -> bool {
        self.observations.len() == self.actions.len() + 1
            && self.rewards.len() == self.observations.len()
            && (self.states.is_empty() || self.states.len() == self.observations.len())
    }

    /// Window covering `obs_len` consecutive observations starting at `start`.
    pub fn window(&self, start: usize, obs_len: usize) -> Sequence {
        Sequence {
            observations: self.observations[start..start + obs_len].to_vec(),
            actions: self.actions[start..start + obs_len - 1].to_vec(),
            rewards: self.rewards[start..start + obs_len].to_vec(),
            states: if self.states.is_empty() {
                Vec::new()
            } else {
                self.states[start..start + obs_len].to_vec()
            },
        }
    }
}

/// Recent history handed to `observe_context`. The simulator state is
/// optional; only the simulator-backed design requires it.
#[derive(Debug, Clone)]
pub struct Context {
    pub observations: Vec<Tensor>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub env_state: Option<EnvState>,
}

impl Context {
    pub fn from_sequence_tail(seq: &Sequence, context_length: usize) -> Self {
        let n = seq.observations.len();
        let start = n - context_length;
        Self {
            observations: seq.observations[start..].to_vec(),
            actions: seq.actions[start.min(seq.actions.len())..].to_vec(),
            rewards: seq.rewards[start..].to_vec(),
            env_state: seq.states.last().cloned(),
        }
    }
}

/// Design-specific planning state produced by `observe_context`.
#[derive(Debug, Clone)]
pub enum Belief {
    /// Deterministic path plus filtered stochastic sample, both `[1, dim]`.
    Latent { h: Tensor, z: Tensor },
    /// Recurrent hidden state of the reward-only model, plus the newest
    /// encoded frame and reward still waiting for their action.
    Recurrent { h: Tensor, obs_feat: Tensor, last_reward: f64 },
    /// Raw frame window for designs that predict in pixel space, with the
    /// actions that connected those frames.
    FrameWindow {
        frames: Vec<Tensor>,
        actions: Vec<Vec<f64>>,
        last_reward: f64,
    },
    /// Cloned true-simulator state.
    Simulator(EnvState),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradNorms {
    pub image: f64,
    pub kl: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub image_nll: f64,
    pub kl: f64,
    pub reward_loss: f64,
    /// L2 norm of each term's full gradient, when diagnostics are enabled.
    pub grad_norms: Option<GradNorms>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionErrors {
    /// Median per-window mean squared pixel error; absent for designs that
    /// never predict frames.
    pub image: Option<f64>,
    /// Median per-window mean squared reward error.
    pub reward: f64,
}

pub enum WorldModel {
    Latent(latent::LatentModel),
    Frame(frame::FrameModel),
    Recurrent(reward::RecurrentRewardModel),
    ConvReward(reward::ConvRewardModel),
    Sim(oracle::OracleModel),
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<WorldModel, ModelError> {
    match config.design {
        ModelDesign::Ltlr | ModelDesign::Ltor | ModelDesign::R(RewardVariant::LatentNoImage) => {
            Ok(WorldModel::Latent(latent::LatentModel::build(config, seed)?))
        }
        ModelDesign::Otor | ModelDesign::Otlr => {
            Ok(WorldModel::Frame(frame::FrameModel::build(config, seed)?))
        }
        ModelDesign::R(RewardVariant::Recurrent) => Ok(WorldModel::Recurrent(
            reward::RecurrentRewardModel::build(config, seed)?,
        )),
        ModelDesign::R(RewardVariant::Conv) => Ok(WorldModel::ConvReward(
            reward::ConvRewardModel::build(config, seed)?,
        )),
        ModelDesign::Oracle => Ok(WorldModel::Sim(oracle::OracleModel::build(config)?)),
    }
}

impl WorldModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Latent(m) => &m.config,
            Self::Frame(m) => &m.config,
            Self::Recurrent(m) => &m.config,
            Self::ConvReward(m) => &m.config,
            Self::Sim(m) => &m.config,
        }
    }

    pub fn design(&self) -> ModelDesign {
        self.config().design
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Self::Latent(m) => &m.params,
            Self::Frame(m) => &m.params,
            Self::Recurrent(m) => &m.params,
            Self::ConvReward(m) => &m.params,
            Self::Sim(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Self::Latent(m) => &mut m.params,
            Self::Frame(m) => &mut m.params,
            Self::Recurrent(m) => &mut m.params,
            Self::ConvReward(m) => &mut m.params,
            Self::Sim(m) => &mut m.params,
        }
    }

    fn validate_batch(&self, batch: &[Sequence]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let need = self.config().sequence_length();
        for seq in batch {
            if seq.observations.len() != need || !seq.check() {
                return Err(ModelError::WrongSequenceLength {
                    need,
                    found: seq.observations.len(),
                });
            }
        }
        Ok(())
    }

    /// One Adam step on a batch of fixed-length sub-sequences.
    pub fn train_batch(&mut self, batch: &[Sequence]) -> Result<LossReport, ModelError> {
        self.validate_batch(batch)?;
        match self {
            Self::Latent(m) => m.train_batch(batch),
            Self::Frame(m) => m.train_batch(batch),
            Self::Recurrent(m) => m.train_batch(batch),
            Self::ConvReward(m) => m.train_batch(batch),
            Self::Sim(_) => Ok(oracle::OracleModel::no_train_report()),
        }
    }

    /// Loss and gradients at the current parameters without an optimizer
    /// step. Stochastic designs draw their sampling noise from `noise_seed`,
    /// so repeated probes at equal parameters are bit-identical.
    pub fn probe_loss(
        &self,
        batch: &[Sequence],
        noise_seed: u64,
    ) -> Result<(LossReport, Gradients), ModelError> {
        self.validate_batch(batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        match self {
            Self::Latent(m) => m.loss_and_grads(batch, &mut rng, false),
            Self::Frame(m) => m.loss_and_grads(batch, &mut rng, false),
            Self::Recurrent(m) => m.loss_and_grads(batch, false),
            Self::ConvReward(m) => m.loss_and_grads(batch, false),
            Self::Sim(_) => Ok((oracle::OracleModel::no_train_report(), Gradients::new())),
        }
    }

    /// Filter the design's planning state from recent history.
    pub fn observe_context(&self, ctx: &Context) -> Result<Belief, ModelError> {
        let need = self.config().context_length;
        if ctx.observations.len() < need || ctx.rewards.len() < need {
            return Err(ModelError::ContextTooShort {
                need,
                found: ctx.observations.len(),
            });
        }
        match self {
            Self::Latent(m) => m.observe_context(ctx),
            Self::Frame(m) => m.observe_context(ctx),
            Self::Recurrent(m) => m.observe_context(ctx),
            Self::ConvReward(m) => m.observe_context(ctx),
            Self::Sim(m) => m.observe_context(ctx),
        }
    }

    /// Predicted return of each candidate action sequence.
    pub fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let need = self.config().prediction_horizon;
        for c in candidates {
            if c.len() != need {
                return Err(ModelError::HorizonMismatch { need, found: c.len() });
            }
        }
        match self {
            Self::Latent(m) => m.imagine_returns(belief, candidates, rng),
            Self::Frame(m) => m.imagine_returns(belief, candidates, rng),
            Self::Recurrent(m) => m.imagine_returns(belief, candidates, rng),
            Self::ConvReward(m) => m.imagine_returns(belief, candidates),
            Self::Sim(m) => m.imagine_returns(belief, candidates),
        }
    }

    /// Median per-window squared errors over sliding windows of the given
    /// episodes. Windows advance by `stride` steps.
    pub fn prediction_errors<'a, I>(
        &self,
        episodes: I,
        stride: usize,
    ) -> Result<PredictionErrors, ModelError>
    where
        I: IntoIterator<Item = &'a Sequence>,
    {
        let mut image_errors = Vec::new();
        let mut reward_errors = Vec::new();
        self.for_each_window(episodes, stride, |img, pairs| {
            if let Some(e) = img {
                image_errors.push(e);
            }
            let n = pairs.len();
            if n > 0 {
                let sq: f64 = pairs.iter().map(|(p, a)| (p - a) * (p - a)).sum();
                reward_errors.push(sq / n as f64);
            }
        })?;
        Ok(PredictionErrors {
            image: if image_errors.is_empty() {
                None
            } else {
                Some(median(&image_errors))
            },
            reward: if reward_errors.is_empty() {
                0.0
            } else {
                median(&reward_errors)
            },
        })
    }

    /// Every horizon step's (predicted, actual) reward pair over sliding
    /// windows of the given episodes, in window order.
    pub fn reward_pairs<'a, I>(
        &self,
        episodes: I,
        stride: usize,
    ) -> Result<Vec<(f64, f64)>, ModelError>
    where
        I: IntoIterator<Item = &'a Sequence>,
    {
        let mut all = Vec::new();
        self.for_each_window(episodes, stride, |_, pairs| all.extend(pairs))?;
        Ok(all)
    }

    fn for_each_window<'a, I, F>(
        &self,
        episodes: I,
        stride: usize,
        mut sink: F,
    ) -> Result<(), ModelError>
    where
        I: IntoIterator<Item = &'a Sequence>,
        F: FnMut(Option<f64>, Vec<(f64, f64)>),
    {
        let stride = stride.max(1);
        let len = self.config().sequence_length();
        for ep in episodes {
            if ep.observations.len() < len {
                continue;
            }
            let mut start = 0;
            while start + len <= ep.observations.len() {
                let window = ep.window(start, len);
                let (img, pairs) = match self {
                    Self::Latent(m) => m.window_eval(&window)?,
                    Self::Frame(m) => m.window_eval(&window)?,
                    Self::Recurrent(m) => (None, m.window_eval(&window)?),
                    Self::ConvReward(m) => (None, m.window_eval(&window)?),
                    Self::Sim(m) => m.window_eval(&window)?,
                };
                sink(img, pairs);
                start += stride;
            }
        }
        Ok(())
    }

    /// Extra per-term backward passes every `every` training steps (0 turns
    /// diagnostics off).
    pub fn set_grad_diagnostics(&mut self, every: u32) {
        match self {
            Self::Latent(m) => m.diag_every = every,
            Self::Frame(m) => m.diag_every = every,
            Self::Recurrent(m) => m.diag_every = every,
            Self::ConvReward(m) => m.diag_every = every,
            Self::Sim(_) => {}
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, self.params())?;
        Ok(())
    }

    /// Replace parameters from a checkpoint, rejecting any mismatch with the
    /// built architecture.
    pub fn load(&mut self, path: &Path) -> Result<(), ModelError> {
        let loaded = load_checkpoint(path)?;
        let current = self.params();
        if loaded.len() != current.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} parameters on disk, architecture has {}",
                loaded.len(),
                current.len()
            )));
        }
        for (name, t) in current.iter() {
            match loaded.get(name) {
                None => {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "missing parameter `{name}`"
                    )))
                }
                Some(l) if l.shape != t.shape => {
                    return Err(ModelError::CheckpointMismatch(format!(
                        "`{name}` has shape {:?} on disk, expected {:?}",
                        l.shape, t.shape
                    )))
                }
                Some(_) => {}
            }
        }
        match self {
            Self::Latent(m) => m.params = loaded,
            Self::Frame(m) => m.params = loaded,
            Self::Recurrent(m) => m.params = loaded,
            Self::ConvReward(m) => m.params = loaded,
            Self::Sim(_) => {}
        }
        Ok(())
    }
}

/// Capacity rows for the latent-dynamics models: (fully connected width,
/// deterministic path width). Level 0 is the desk default.
pub(crate) fn latent_scale(level: u32) -> Result<(usize, usize), ModelError> {
    const FC: [usize; 9] = [100, 100, 100, 50, 50, 50, 200, 200, 200];
    const DET: [usize; 9] = [200, 100, 50, 200, 100, 50, 200, 100, 50];
    match level {
        0 => Ok((64, 64)),
        1..=9 => Ok((FC[level as usize - 1], DET[level as usize - 1])),
        _ => Err(ModelError::InvalidScaleLevel { design: "latent dynamics", level }),
    }
}

/// Recurrent filter counts for the frame-dynamics models. Level 0 is the
/// desk default; levels 1..=6 double the whole stack each step.
pub(crate) fn frame_scale(level: u32) -> Result<[usize; 7], ModelError> {
    const BASE: [usize; 7] = [1, 1, 2, 2, 4, 2, 1];
    match level {
        0 => Ok([4, 4, 8, 8, 16, 8, 4]),
        1..=6 => {
            let m = 1usize << (level - 1);
            Ok(BASE.map(|f| f * m))
        }
        _ => Err(ModelError::InvalidScaleLevel { design: "frame dynamics", level }),
    }
}

/// Observations `t_start..t_end` of every sequence stacked time-major:
/// row block `t * batch` holds step `t_start + t` across the batch.
pub(crate) fn stack_observations(
    batch: &[Sequence],
    t_start: usize,
    t_end: usize,
    image_size: usize,
) -> Tensor {
    let b = batch.len();
    let px = image_size * image_size * 3;
    let mut data = Vec::with_capacity((t_end - t_start) * b * px);
    for t in t_start..t_end {
        for seq in batch {
            data.extend_from_slice(&seq.observations[t].data);
        }
    }
    Tensor::new(vec![(t_end - t_start) * b, image_size, image_size, 3], data)
}

pub(crate) fn actions_at(batch: &[Sequence], t: usize) -> Tensor {
    let b = batch.len();
    let dim = batch[0].actions[0].len();
    let mut data = Vec::with_capacity(b * dim);
    for seq in batch {
        data.extend_from_slice(&seq.actions[t]);
    }
    Tensor::new(vec![b, dim], data)
}

pub(crate) fn rewards_at(batch: &[Sequence], t: usize) -> Tensor {
    let data: Vec<f64> = batch.iter().map(|s| s.rewards[t]).collect();
    Tensor::new(vec![batch.len(), 1], data)
}

/// Image reconstruction loss with the configured mask applied to prediction
/// and target alike: half the summed squared error, which is the
/// unit-variance Gaussian NLL with its constant normalizer dropped so the
/// reported value can approach zero. The model's input is never masked,
/// only the loss.
pub fn masked_image_nll(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    mask: &LossMaskSpec,
    image_size: usize,
) -> Result<Var, ModelError> {
    let (pred, target) = match mask {
        LossMaskSpec::None => (pred, g.input(target.clone())),
        LossMaskSpec::Crop(f) => {
            let side = mask::crop_side(*f, image_size)?;
            let off = (image_size - side) / 2;
            let pred_c = g.crop(pred, off, off, side, side);
            let t = g.input(target.clone());
            let target_c = g.crop(t, off, off, side, side);
            (pred_c, target_c)
        }
        LossMaskSpec::Resize(f) => {
            let side = mask::crop_side(*f, image_size)?;
            if image_size % side != 0 {
                return Err(ModelError::UnsupportedResize { side, image: image_size });
            }
            let k = image_size / side;
            let pred_d = g.block_mean(pred, k);
            let t = g.input(target.clone());
            let target_d = g.block_mean(t, k);
            (pred_d, target_d)
        }
    };
    let d = g.sub(pred, target);
    let d2 = g.square(d);
    let total = g.sum(d2);
    Ok(g.scale(total, 0.5))
}

pub(crate) fn squared_error_mean(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let d2 = g.square(d);
    g.mean(d2)
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data)
}

/// Repeat a `[1, ...]` tensor `count` times along the first axis.
pub(crate) fn tile_rows(t: &Tensor, count: usize) -> Tensor {
    assert_eq!(t.shape[0], 1);
    let mut shape = t.shape.clone();
    shape[0] = count;
    let mut data = Vec::with_capacity(t.data.len() * count);
    for _ in 0..count {
        data.extend_from_slice(&t.data);
    }
    Tensor::new(shape, data)
}

/// Step `t` of every candidate plan as a `[C, action_dim]` tensor.
pub(crate) fn candidate_actions_at(candidates: &[Vec<Vec<f64>>], t: usize) -> Tensor {
    let dim = candidates[0][t].len();
    let mut data = Vec::with_capacity(candidates.len() * dim);
    for plan in candidates {
        data.extend_from_slice(&plan[t]);
    }
    Tensor::new(vec![candidates.len(), dim], data)
}

/// L2 norm across every tensor in a gradient map.
pub(crate) fn grad_norm(grads: &crate::tensor::Gradients) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
