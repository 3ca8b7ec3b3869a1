//! Experiment protocols: the interactive loop that alternates training with
//! data collection, the fixed-dataset variant that never touches the
//! environment while learning, and the dataset constructions behind the
//! aggregate analyses.

pub mod wlds;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::envs::{Env, Task, DEFAULT_ACTION_REPEAT, DEFAULT_EPISODE_STEPS, DEFAULT_IMAGE_SIZE};
use crate::models::{
    build_model, GradNorms, LossMaskSpec, LossReport, ModelConfig, ModelDesign, ModelError,
    PredictionErrors, Sequence, WorldModel,
};
use crate::planner::{self, CemParams, PlannerError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    DatasetFile(#[from] wlds::WldsError),
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
    #[error("planner horizon {planner} does not match model horizon {model}")]
    HorizonMismatch { planner: usize, model: usize },
    #[error("no episode is long enough to cut a {0}-observation training window")]
    NoWindows(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has no {0} episodes")]
    EmptyPartition(&'static str),
    #[error("dataset mixes tasks {0} and {1}")]
    MixedTasks(&'static str, &'static str),
    #[error("reward threshold {threshold} leaves the {side} side empty")]
    DegenerateSplit { threshold: f64, side: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Eval,
}

impl Partition {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

/// One recorded episode plus the run metadata needed to file it.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub seed: u64,
    pub mode: Mode,
    pub sequence: Sequence,
    /// Wall-clock seconds per agent step, planning included. Not part of the
    /// deterministic record and not persisted.
    pub step_seconds: Vec<f64>,
    /// Whether the environment ended the episode before its step budget.
    pub truncated: bool,
}

impl Episode {
    /// Undiscounted sum of step rewards.
    pub fn score(&self) -> f64 {
        self.sequence.rewards.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.sequence.steps()
    }

    /// Largest single-step reward, the quantity the reward-threshold split
    /// partitions on.
    pub fn max_step_reward(&self) -> f64 {
        self.sequence.rewards[1..].iter().fold(f64::NEG_INFINITY, |m, &r| m.max(r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub episode: Episode,
    /// Which run produced the episode, e.g. `ltlr/seed3/train`.
    pub provenance: String,
    pub partition: Partition,
}

/// Labeled pool of episodes. Every entry carries its own provenance string
/// and partition label, so the two partitions are disjoint by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The single task every episode shares.
    pub fn single_task(&self) -> Result<Task, HarnessError> {
        let mut it = self.entries.iter();
        let first = it.next().ok_or(HarnessError::EmptyDataset)?.episode.task;
        for e in it {
            if e.episode.task != first {
                return Err(HarnessError::MixedTasks(first.id(), e.episode.task.id()));
            }
        }
        Ok(first)
    }

    pub fn partition_len(&self, p: Partition) -> usize {
        self.entries.iter().filter(|e| e.partition == p).count()
    }

    pub fn partition_sequences(&self, p: Partition) -> Vec<&Sequence> {
        self.entries
            .iter()
            .filter(|e| e.partition == p)
            .map(|e| &e.episode.sequence)
            .collect()
    }

    /// Equality of everything the dataset file persists. Wall-clock timings
    /// and simulator states are not part of the persisted record, so they are
    /// ignored here.
    pub fn same_content(&self, other: &Dataset) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.provenance == b.provenance
                    && a.partition == b.partition
                    && a.episode.task == b.episode.task
                    && a.episode.seed == b.episode.seed
                    && a.episode.mode == b.episode.mode
                    && a.episode.sequence.observations == b.episode.sequence.observations
                    && a.episode.sequence.actions == b.episode.sequence.actions
                    && a.episode.sequence.rewards == b.episode.sequence.rewards
            })
    }
}

/// Score of one evaluation episode, indexed by the environment frames
/// consumed before it started.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub env_frames: u64,
    pub score: f64,
}

/// Everything a protocol run reports. All fields except the two timing
/// totals reproduce bit-exactly from the same config.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: RunConfig,
    pub evals: Vec<EvalPoint>,
    /// One averaged loss report per training iteration.
    pub losses: Vec<LossReport>,
    /// Environment frames consumed by the whole run.
    pub env_frames: u64,
    /// 90th percentile of the evaluation scores (fixed-dataset protocol).
    pub score_p90: Option<f64>,
    /// Prediction errors on the held-out partition (fixed-dataset protocol).
    pub eval_errors: Option<PredictionErrors>,
    pub train_seconds: f64,
    pub episode_seconds: f64,
}

impl RunRecord {
    /// Equality of everything except wall-clock timing.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.config == other.config
            && self.evals == other.evals
            && self.losses == other.losses
            && self.env_frames == other.env_frames
            && self.score_p90 == other.score_p90
            && self.eval_errors == other.eval_errors
    }
}

/// Complete description of one run. `new` fills the desk-scale defaults;
/// every field can be overridden before starting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub design: ModelDesign,
    pub task: Task,
    pub seed: u64,
    pub image_size: usize,
    pub scale_level: u32,
    pub loss_mask: LossMaskSpec,
    pub context_length: usize,
    /// Model rollout horizon; must match `cem.horizon`.
    pub prediction_horizon: usize,
    pub action_repeat: u32,
    pub episode_steps: u32,
    /// Training episodes collected by the interactive protocol.
    pub total_episodes: u32,
    /// Random-action episodes collected before the first training iteration.
    pub seed_episodes: u32,
    pub steps_per_iteration: u32,
    pub batch_size: usize,
    /// Evaluate after every this many training episodes.
    pub eval_every: u32,
    /// Exploration noise stddev added to executed actions in train mode.
    pub noise_stddev: f64,
    pub cem: CemParams,
    /// Gradient steps of the fixed-dataset protocol.
    pub offline_steps: u32,
    pub offline_eval_episodes: u32,
    /// Window stride when measuring prediction errors on held-out data.
    pub error_stride: usize,
    /// Worker threads for the fixed-dataset evaluation episodes.
    pub parallel_eval: usize,
    /// Per-term gradient-norm diagnostics every N steps (0 = off).
    pub grad_diag_every: u32,
    /// Loss-weight overrides; `None` keeps the design's default.
    pub beta: Option<f64>,
    pub free_nats: Option<f64>,
    pub reward_loss_multiplier: Option<f64>,
    pub latent_sharing: Option<bool>,
}

impl RunConfig {
    pub fn new(design: ModelDesign, task: Task, seed: u64) -> Self {
        Self {
            design,
            task,
            seed,
            image_size: DEFAULT_IMAGE_SIZE,
            scale_level: 0,
            loss_mask: LossMaskSpec::None,
            context_length: 2,
            prediction_horizon: 12,
            action_repeat: DEFAULT_ACTION_REPEAT,
            episode_steps: DEFAULT_EPISODE_STEPS,
            total_episodes: 30,
            seed_episodes: 5,
            steps_per_iteration: 100,
            batch_size: 16,
            eval_every: 10,
            noise_stddev: 0.3,
            cem: CemParams::default(),
            offline_steps: 20_000,
            offline_eval_episodes: 100,
            error_stride: 4,
            parallel_eval: 1,
            grad_diag_every: 0,
            beta: None,
            free_nats: None,
            reward_loss_multiplier: None,
            latent_sharing: None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.design, self.task);
        c.image_size = self.image_size;
        c.scale_level = self.scale_level;
        c.loss_mask = self.loss_mask;
        c.context_length = self.context_length;
        c.prediction_horizon = self.prediction_horizon;
        c.action_repeat = self.action_repeat;
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.free_nats {
            c.free_nats = v;
        }
        if let Some(v) = self.reward_loss_multiplier {
            c.reward_loss_multiplier = v;
        }
        if let Some(v) = self.latent_sharing {
            c.latent_sharing = v;
        }
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.cem.check()?;
        if self.cem.horizon != self.prediction_horizon {
            return Err(HarnessError::HorizonMismatch {
                planner: self.cem.horizon,
                model: self.prediction_horizon,
            });
        }
        if self.batch_size == 0 {
            return Err(HarnessError::BadConfig("batch_size must be at least 1"));
        }
        if self.steps_per_iteration == 0 {
            return Err(HarnessError::BadConfig("steps_per_iteration must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(HarnessError::BadConfig("eval_every must be at least 1"));
        }
        if self.parallel_eval == 0 {
            return Err(HarnessError::BadConfig("parallel_eval must be at least 1"));
        }
        if self.offline_eval_episodes == 0 {
            return Err(HarnessError::BadConfig("offline_eval_episodes must be at least 1"));
        }
        if self.error_stride == 0 {
            return Err(HarnessError::BadConfig("error_stride must be at least 1"));
        }
        if !(self.noise_stddev >= 0.0) {
            return Err(HarnessError::BadConfig("noise_stddev must be non-negative"));
        }
        if self.context_length < 1 {
            return Err(HarnessError::BadConfig("context_length must be at least 1"));
        }
        if (self.episode_steps as usize) + 1 < self.context_length + self.prediction_horizon {
            return Err(HarnessError::BadConfig("episodes are too short to cut one training window"));
        }
        if self.total_episodes > 0 && self.seed_episodes == 0 {
            return Err(HarnessError::BadConfig("the first training iteration needs seed episodes"));
        }
        Ok(())
    }
}

pub const LANE_MODEL: u64 = 0;
pub const LANE_SEED_EPISODES: u64 = 1;
const LANE_TRAIN_EPISODES: u64 = 2;
const LANE_EVAL_EPISODES: u64 = 3;
const LANE_BATCHES: u64 = 4;
const LANE_SHUFFLE: u64 = 5;
pub const LANE_OFFLINE_EVAL: u64 = 6;

/// Deterministic per-purpose seed: a SplitMix64-style mix of the run seed
/// with a lane id and an index, so every episode, batch stream, and shuffle
/// draws from its own stream.
pub fn subseed(seed: u64, lane: u64, index: u64) -> u64 {
    let mut z = seed
        ^ lane.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One episode driven by uniform random actions, recorded like any other.
pub fn collect_random_episode(env: &Env, repeat: u32, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adim = env.task.action_dim();
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
        let action: Vec<f64> = (0..adim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let result = env.step_repeated(&mut state, &action, repeat);
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
    Episode { task: env.task, seed, mode: Mode::Train, sequence: seq, step_seconds, truncated }
}

/// `batch` training windows of exactly `obs_len` observations, sampled
/// uniformly over eligible episodes and then over valid start offsets.
pub fn sample_batch(
    pool: &[&Sequence],
    batch: usize,
    obs_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sequence>, HarnessError> {
    let eligible: Vec<&Sequence> =
        pool.iter().copied().filter(|s| s.observations.len() >= obs_len).collect();
    if eligible.is_empty() {
        return Err(HarnessError::NoWindows(obs_len));
    }
    Ok((0..batch)
        .map(|_| {
            let seq = eligible[rng.gen_range(0..eligible.len())];
            let start = rng.gen_range(0..=seq.observations.len() - obs_len);
            seq.window(start, obs_len)
        })
        .collect())
}

/// Field-wise mean of the reports; gradient norms average over the steps
/// that measured them.
pub fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut out =
        LossReport { total: 0.0, image_nll: 0.0, kl: 0.0, reward_loss: 0.0, grad_norms: None };
    let mut norms = GradNorms::default();
    let mut measured = 0usize;
    for r in reports {
        out.total += r.total;
        out.image_nll += r.image_nll;
        out.kl += r.kl;
        out.reward_loss += r.reward_loss;
        if let Some(g) = r.grad_norms {
            norms.image += g.image;
            norms.kl += g.kl;
            norms.reward += g.reward;
            measured += 1;
        }
    }
    out.total /= n;
    out.image_nll /= n;
    out.kl /= n;
    out.reward_loss /= n;
    if measured > 0 {
        let k = measured as f64;
        out.grad_norms = Some(GradNorms {
            image: norms.image / k,
            kl: norms.kl / k,
            reward: norms.reward / k,
        });
    }
    out
}

/// Interactive protocol: seed the buffer with random episodes, then loop
/// train-collect, evaluating after every `eval_every` training episodes.
/// Returns the record, everything collected, and the trained model;
/// evaluation episodes enter the dataset under the eval partition but never
/// the training buffer.
pub fn run_online(config: &RunConfig) -> Result<(RunRecord, Dataset, WorldModel), HarnessError> {
    config.validate()?;
    let mcfg = config.model_config();
    let mut model = build_model(&mcfg, subseed(config.seed, LANE_MODEL, 0))?;
    model.set_grad_diagnostics(config.grad_diag_every);
    let env = Env::new(config.task)
        .with_image_size(config.image_size)
        .with_episode_steps(config.episode_steps);
    let prov = |kind: &str| format!("{}/seed{}/{}", config.design.id(), config.seed, kind);

    let mut dataset = Dataset::default();
    let mut train_pool: Vec<usize> = Vec::new();
    let mut evals = Vec::new();
    let mut losses = Vec::new();
    let mut train_seconds = 0.0;
    let mut episode_seconds = 0.0;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, LANE_BATCHES, 0));

    for i in 0..config.seed_episodes {
        let ep = collect_random_episode(
            &env,
            config.action_repeat,
            subseed(config.seed, LANE_SEED_EPISODES, i as u64),
        );
        episode_seconds += ep.step_seconds.iter().sum::<f64>();
        train_pool.push(dataset.entries.len());
        dataset.entries.push(DatasetEntry {
            episode: ep,
            provenance: prov("random"),
            partition: Partition::Train,
        });
    }

    let seq_len = mcfg.sequence_length();
    for episode_idx in 1..=config.total_episodes {
        let t0 = Instant::now();
        let mut reports = Vec::with_capacity(config.steps_per_iteration as usize);
        {
            let pool: Vec<&Sequence> =
                train_pool.iter().map(|&i| &dataset.entries[i].episode.sequence).collect();
            for _ in 0..config.steps_per_iteration {
                let batch = sample_batch(&pool, config.batch_size, seq_len, &mut batch_rng)?;
                reports.push(model.train_batch(&batch)?);
            }
        }
        train_seconds += t0.elapsed().as_secs_f64();
        losses.push(mean_report(&reports));
        log::debug!(
            "episode {episode_idx}/{}: mean loss {:.5}",
            config.total_episodes,
            losses.last().unwrap().total
        );

        let ep = planner::mpc_episode(
            &env,
            &model,
            &config.cem,
            config.noise_stddev,
            Mode::Train,
            subseed(config.seed, LANE_TRAIN_EPISODES, episode_idx as u64),
        )?;
        episode_seconds += ep.step_seconds.iter().sum::<f64>();
        train_pool.push(dataset.entries.len());
        dataset.entries.push(DatasetEntry {
            episode: ep,
            provenance: prov("train"),
            partition: Partition::Train,
        });

        if episode_idx % config.eval_every == 0 {
            let frames_before = env.frames_stepped();
            let ep = planner::mpc_episode(
                &env,
                &model,
                &config.cem,
                config.noise_stddev,
                Mode::Eval,
                subseed(config.seed, LANE_EVAL_EPISODES, episode_idx as u64),
            )?;
            episode_seconds += ep.step_seconds.iter().sum::<f64>();
            log::info!("eval after episode {episode_idx}: score {:.3} at {frames_before} frames", ep.score());
            evals.push(EvalPoint { env_frames: frames_before, score: ep.score() });
            dataset.entries.push(DatasetEntry {
                episode: ep,
                provenance: prov("eval"),
                partition: Partition::Eval,
            });
        }
    }

    let record = RunRecord {
        config: config.clone(),
        evals,
        losses,
        env_frames: env.frames_stepped(),
        score_p90: None,
        eval_errors: None,
        train_seconds,
        episode_seconds,
    };
    Ok((record, dataset, model))
}

/// Fixed-dataset protocol: train on the train partition without touching the
/// environment, then score `offline_eval_episodes` fresh evaluation episodes
/// and report their 90th percentile plus prediction errors on the held-out
/// partition.
pub fn run_offline(
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<(RunRecord, WorldModel), HarnessError> {
    config.validate()?;
    let task = dataset.single_task()?;
    if task != config.task {
        return Err(HarnessError::MixedTasks(config.task.id(), task.id()));
    }
    let train_pool = dataset.partition_sequences(Partition::Train);
    if train_pool.is_empty() {
        return Err(HarnessError::EmptyPartition("train"));
    }
    let eval_pool = dataset.partition_sequences(Partition::Eval);
    if eval_pool.is_empty() {
        return Err(HarnessError::EmptyPartition("eval"));
    }

    let mcfg = config.model_config();
    let mut model = build_model(&mcfg, subseed(config.seed, LANE_MODEL, 0))?;
    model.set_grad_diagnostics(config.grad_diag_every);
    let env = Env::new(config.task)
        .with_image_size(config.image_size)
        .with_episode_steps(config.episode_steps);

    let seq_len = mcfg.sequence_length();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, LANE_BATCHES, 0));
    let t0 = Instant::now();
    let mut losses = Vec::new();
    let mut reports = Vec::with_capacity(config.steps_per_iteration as usize);
    for step in 0..config.offline_steps {
        let batch = sample_batch(&train_pool, config.batch_size, seq_len, &mut batch_rng)?;
        reports.push(model.train_batch(&batch)?);
        if reports.len() == config.steps_per_iteration as usize || step + 1 == config.offline_steps
        {
            losses.push(mean_report(&reports));
            reports.clear();
            log::debug!(
                "offline step {}/{}: mean loss {:.5}",
                step + 1,
                config.offline_steps,
                losses.last().unwrap().total
            );
        }
    }
    let train_seconds = t0.elapsed().as_secs_f64();
    debug_assert_eq!(env.frames_stepped(), 0, "training must not touch the environment");

    let n_eval = config.offline_eval_episodes as usize;
    let mut scores = vec![0.0f64; n_eval];
    let mut seconds = vec![0.0f64; n_eval];
    run_evals(&env, &model, config, &mut scores, &mut seconds)?;
    let episode_seconds = seconds.iter().sum();

    let frames_per_episode = config.episode_steps as u64 * config.action_repeat as u64;
    let evals: Vec<EvalPoint> = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| EvalPoint { env_frames: i as u64 * frames_per_episode, score })
        .collect();
    let score_p90 = analysis::percentile(&scores, 90.0)?;
    let eval_errors = model.prediction_errors(eval_pool.iter().copied(), config.error_stride)?;

    let record = RunRecord {
        config: config.clone(),
        evals,
        losses,
        env_frames: env.frames_stepped(),
        score_p90: Some(score_p90),
        eval_errors: Some(eval_errors),
        train_seconds,
        episode_seconds,
    };
    Ok((record, model))
}

/// The evaluation episodes of the fixed-dataset protocol, fanned out over
/// `parallel_eval` workers. Each episode's seed depends only on its index,
/// so the schedule cannot change any score.
fn run_evals(
    env: &Env,
    model: &WorldModel,
    config: &RunConfig,
    scores: &mut [f64],
    seconds: &mut [f64],
) -> Result<(), HarnessError> {
    let episode = |i: usize| -> Result<Episode, HarnessError> {
        Ok(planner::mpc_episode(
            env,
            model,
            &config.cem,
            config.noise_stddev,
            Mode::Eval,
            subseed(config.seed, LANE_OFFLINE_EVAL, i as u64),
        )?)
    };
    let workers = config.parallel_eval.min(scores.len()).max(1);
    if workers == 1 {
        for (i, (score, sec)) in scores.iter_mut().zip(seconds.iter_mut()).enumerate() {
            let ep = episode(i)?;
            *score = ep.score();
            *sec = ep.step_seconds.iter().sum();
        }
        return Ok(());
    }
    let chunk = scores.len().div_ceil(workers);
    let results: Vec<Result<(), HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = scores
            .chunks_mut(chunk)
            .zip(seconds.chunks_mut(chunk))
            .enumerate()
            .map(|(w, (score_chunk, sec_chunk))| {
                let episode = &episode;
                scope.spawn(move || -> Result<(), HarnessError> {
                    for (j, (score, sec)) in
                        score_chunk.iter_mut().zip(sec_chunk.iter_mut()).enumerate()
                    {
                        let ep = episode(w * chunk + j)?;
                        *score = ep.score();
                        *sec = ep.step_seconds.iter().sum();
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    results.into_iter().collect()
}

/// Concatenates episode pools from several runs into one dataset with a
/// fresh seeded shuffle and a 90/10 train/eval split. Provenance strings
/// ride along unchanged.
pub fn aggregate(datasets: &[Dataset], seed: u64) -> Result<Dataset, HarnessError> {
    let mut entries: Vec<DatasetEntry> =
        datasets.iter().flat_map(|d| d.entries.iter().cloned()).collect();
    if entries.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let first = entries[0].episode.task;
    if let Some(e) = entries.iter().find(|e| e.episode.task != first) {
        return Err(HarnessError::MixedTasks(first.id(), e.episode.task.id()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, LANE_SHUFFLE, 0));
    entries.shuffle(&mut rng);
    let eval = entries.len().div_ceil(10);
    let train = entries.len() - eval;
    for (i, e) in entries.iter_mut().enumerate() {
        e.partition = if i < train { Partition::Train } else { Partition::Eval };
    }
    Ok(Dataset { entries })
}

/// Relabels a dataset so training only ever sees episodes whose best step
/// reward stays below `threshold`, keeping every high-reward episode for
/// evaluation.
pub fn build_optimism_split(dataset: &Dataset, threshold: f64) -> Result<Dataset, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut out = dataset.clone();
    let mut train = 0usize;
    for e in &mut out.entries {
        e.partition = if e.episode.max_step_reward() < threshold {
            train += 1;
            Partition::Train
        } else {
            Partition::Eval
        };
    }
    if train == 0 {
        return Err(HarnessError::DegenerateSplit { threshold, side: "train" });
    }
    if train == out.entries.len() {
        return Err(HarnessError::DegenerateSplit { threshold, side: "eval" });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;
    use crate::models::RewardVariant;

    fn tiny_config(design: ModelDesign) -> RunConfig {
        let mut c = RunConfig::new(design, Task::PendulumSwingup, 5);
        c.episode_steps = 6;
        c.prediction_horizon = 3;
        c.cem = CemParams { horizon: 3, iterations: 2, candidates: 6, elites: 2, ..CemParams::default() };
        c.seed_episodes = 1;
        c.total_episodes = 0;
        c.steps_per_iteration = 1;
        c.batch_size = 2;
        c.eval_every = 2;
        c.offline_steps = 4;
        c.offline_eval_episodes = 3;
        c.error_stride = 2;
        c
    }

    fn random_dataset(n: usize, steps: u32, first_partition_eval: usize) -> Dataset {
        let env = Env::new(Task::PendulumSwingup).with_episode_steps(steps);
        let entries = (0..n)
            .map(|i| DatasetEntry {
                episode: collect_random_episode(&env, 4, 100 + i as u64),
                provenance: format!("toy/seed{i}/random"),
                partition: if i < first_partition_eval { Partition::Eval } else { Partition::Train },
            })
            .collect();
        Dataset { entries }
    }

    #[test]
    fn subseeds_separate_lanes_and_indices() {
        assert_eq!(subseed(1, 2, 3), subseed(1, 2, 3));
        assert_ne!(subseed(1, 2, 3), subseed(1, 2, 4));
        assert_ne!(subseed(1, 2, 3), subseed(1, 3, 3));
        assert_ne!(subseed(1, 2, 3), subseed(2, 2, 3));
    }

    #[test]
    fn random_episodes_are_deterministic_and_counted() {
        let env = Env::new(Task::PendulumSwingup).with_episode_steps(5);
        let a = collect_random_episode(&env, 4, 9);
        let b = collect_random_episode(&env, 4, 9);
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.steps(), 5);
        assert!(!a.truncated);
        assert!(a.sequence.rewards.iter().all(|r| (0.0..=4.0).contains(r)));
        assert_eq!(env.frames_stepped(), 2 * 5 * 4);
    }

    #[test]
    fn batches_cut_exact_windows() {
        let env = Env::new(Task::PendulumSwingup).with_episode_steps(10);
        let ep = collect_random_episode(&env, 4, 1);
        let pool = [&ep.sequence];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&pool, 3, 5, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
        for w in &batch {
            assert_eq!(w.observations.len(), 5);
            assert_eq!(w.actions.len(), 4);
            assert!(w.check());
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(batch, sample_batch(&pool, 3, 5, &mut rng2).unwrap());
    }

    #[test]
    fn too_short_episodes_cannot_fill_a_batch() {
        let env = Env::new(Task::PendulumSwingup).with_episode_steps(3);
        let ep = collect_random_episode(&env, 4, 1);
        let pool = [&ep.sequence];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&pool, 2, 5, &mut rng), Err(HarnessError::NoWindows(5))));
    }

    #[test]
    fn mean_report_averages_every_field() {
        let a = LossReport { total: 2.0, image_nll: 1.0, kl: 0.5, reward_loss: 0.5, grad_norms: None };
        let b = LossReport {
            total: 4.0,
            image_nll: 2.0,
            kl: 1.5,
            reward_loss: 0.5,
            grad_norms: Some(GradNorms { image: 3.0, kl: 1.0, reward: 2.0 }),
        };
        let m = mean_report(&[a, b]);
        assert_eq!(m.total, 3.0);
        assert_eq!(m.image_nll, 1.5);
        assert_eq!(m.kl, 1.0);
        assert_eq!(m.reward_loss, 0.5);
        assert_eq!(m.grad_norms, Some(GradNorms { image: 3.0, kl: 1.0, reward: 2.0 }));
    }

    #[test]
    fn config_validation_catches_inconsistencies() {
        let mut c = tiny_config(ModelDesign::Oracle);
        c.cem.horizon = 4;
        assert!(matches!(
            c.validate(),
            Err(HarnessError::HorizonMismatch { planner: 4, model: 3 })
        ));
        let mut c = tiny_config(ModelDesign::Oracle);
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(HarnessError::BadConfig(_))));
        let mut c = tiny_config(ModelDesign::Oracle);
        c.episode_steps = 3;
        assert!(matches!(c.validate(), Err(HarnessError::BadConfig(_))));
    }

    #[test]
    fn zero_episode_run_keeps_only_seed_data() {
        let mut c = tiny_config(ModelDesign::Oracle);
        c.seed_episodes = 2;
        let (record, dataset, _) = run_online(&c).unwrap();
        assert!(record.evals.is_empty());
        assert!(record.losses.is_empty());
        assert_eq!(dataset.len(), 2);
        assert!(dataset.entries.iter().all(|e| e.provenance == "oracle/seed5/random"));
        assert_eq!(record.env_frames, 2 * 6 * 4);
    }

    #[test]
    fn online_schedule_and_frame_accounting() {
        let mut c = tiny_config(ModelDesign::Oracle);
        c.total_episodes = 5;
        c.eval_every = 2;
        let (record, dataset, _) = run_online(&c).unwrap();
        // 1 seed + 5 train + evals after training episodes 2 and 4
        assert_eq!(record.losses.len(), 5);
        assert_eq!(record.evals.len(), 2);
        assert_eq!(dataset.len(), 8);
        assert_eq!(record.env_frames, 8 * 6 * 4);
        assert_eq!(record.evals[0].env_frames, 3 * 6 * 4);
        assert_eq!(record.evals[1].env_frames, 6 * 6 * 4);
        assert_eq!(dataset.partition_len(Partition::Eval), 2);
        let kinds: Vec<&str> =
            dataset.entries.iter().map(|e| e.provenance.rsplit('/').next().unwrap()).collect();
        assert_eq!(kinds, ["random", "train", "train", "eval", "train", "train", "eval", "train"]);
    }

    #[test]
    fn online_runs_reproduce_bit_for_bit() {
        let mut c = tiny_config(ModelDesign::Oracle);
        c.total_episodes = 3;
        let (rec_a, data_a, _) = run_online(&c).unwrap();
        let (rec_b, data_b, _) = run_online(&c).unwrap();
        assert!(rec_a.same_outcome(&rec_b));
        assert!(data_a.same_content(&data_b));
    }

    #[test]
    fn offline_run_reports_percentile_and_exact_oracle_errors() {
        let c = tiny_config(ModelDesign::Oracle);
        let dataset = random_dataset(4, 6, 1);
        let (record, _) = run_offline(&c, &dataset).unwrap();
        assert_eq!(record.env_frames, 3 * 6 * 4);
        assert_eq!(record.evals.len(), 3);
        assert_eq!(record.evals[1].env_frames, 24);
        assert_eq!(record.losses.len(), 4);
        assert!(record.score_p90.is_some());
        // replaying from recorded simulator states is exact
        assert_eq!(record.eval_errors.unwrap().reward, 0.0);
        let (again, _) = run_offline(&c, &dataset).unwrap();
        assert!(record.same_outcome(&again));
    }

    #[test]
    fn parallel_evaluation_changes_nothing() {
        let serial = tiny_config(ModelDesign::Oracle);
        let mut parallel = serial.clone();
        parallel.parallel_eval = 3;
        let dataset = random_dataset(4, 6, 1);
        let (a, _) = run_offline(&serial, &dataset).unwrap();
        let (b, _) = run_offline(&parallel, &dataset).unwrap();
        // the records differ only in the config's thread count
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.score_p90, b.score_p90);
        assert_eq!(a.eval_errors, b.eval_errors);
    }

    #[test]
    fn offline_needs_both_partitions() {
        let c = tiny_config(ModelDesign::Oracle);
        let all_train = random_dataset(3, 6, 0);
        assert!(matches!(run_offline(&c, &all_train), Err(HarnessError::EmptyPartition("eval"))));
        let mut all_eval = all_train;
        for e in &mut all_eval.entries {
            e.partition = Partition::Eval;
        }
        assert!(matches!(run_offline(&c, &all_eval), Err(HarnessError::EmptyPartition("train"))));
        assert!(matches!(
            run_offline(&c, &Dataset::default()),
            Err(HarnessError::EmptyDataset)
        ));
    }

    #[test]
    fn offline_training_losses_survive_a_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.wlds");
        let mut c = tiny_config(ModelDesign::R(RewardVariant::Recurrent));
        c.offline_steps = 3;
        c.offline_eval_episodes = 2;
        let dataset = random_dataset(3, 6, 1);
        wlds::save_dataset(&dataset, &path).unwrap();
        let reloaded = wlds::load_dataset(&path).unwrap();
        let (direct, _) = run_offline(&c, &dataset).unwrap();
        let (after, _) = run_offline(&c, &reloaded).unwrap();
        assert_eq!(direct.losses, after.losses);
        assert_eq!(direct.evals, after.evals);
    }

    #[test]
    fn aggregation_splits_ninety_ten_and_keeps_provenance() {
        let dataset = random_dataset(10, 3, 0);
        let mut provs: Vec<String> = dataset.entries.iter().map(|e| e.provenance.clone()).collect();
        let agg = aggregate(std::slice::from_ref(&dataset), 0).unwrap();
        assert_eq!(agg.partition_len(Partition::Train), 9);
        assert_eq!(agg.partition_len(Partition::Eval), 1);
        let mut agg_provs: Vec<String> = agg.entries.iter().map(|e| e.provenance.clone()).collect();
        provs.sort();
        agg_provs.sort();
        assert_eq!(provs, agg_provs);
        let again = aggregate(std::slice::from_ref(&dataset), 0).unwrap();
        assert!(agg.same_content(&again));
        let reshuffled = aggregate(std::slice::from_ref(&dataset), 1).unwrap();
        assert!(!agg.same_content(&reshuffled));
    }

    #[test]
    fn aggregation_rejects_mixed_tasks() {
        let pendulum = random_dataset(2, 3, 0);
        let reacher_env = Env::new(Task::PointReacherSparse).with_episode_steps(3);
        let reacher = Dataset {
            entries: vec![DatasetEntry {
                episode: collect_random_episode(&reacher_env, 4, 0),
                provenance: "toy/seed0/random".into(),
                partition: Partition::Train,
            }],
        };
        assert!(matches!(
            aggregate(&[pendulum, reacher], 0),
            Err(HarnessError::MixedTasks("pendulum_swingup", "point_reacher_sparse"))
        ));
        assert!(matches!(aggregate(&[], 0), Err(HarnessError::EmptyDataset)));
    }

    #[test]
    fn optimism_split_keeps_low_reward_episodes_for_training() {
        let dataset = random_dataset(8, 5, 0);
        let mut maxima: Vec<f64> =
            dataset.entries.iter().map(|e| e.episode.max_step_reward()).collect();
        maxima.sort_by(|a, b| a.total_cmp(b));
        let threshold = 0.5 * (maxima[3] + maxima[4]);
        let split = build_optimism_split(&dataset, threshold).unwrap();
        assert!(split.partition_len(Partition::Train) > 0);
        assert!(split.partition_len(Partition::Eval) > 0);
        for e in &split.entries {
            match e.partition {
                Partition::Train => assert!(e.episode.max_step_reward() < threshold),
                Partition::Eval => assert!(e.episode.max_step_reward() >= threshold),
            }
        }
        let above_everything = maxima[7] + 1.0;
        assert!(matches!(
            build_optimism_split(&dataset, above_everything),
            Err(HarnessError::DegenerateSplit { side: "eval", .. })
        ));
        let below_everything = maxima[0] - 1.0;
        assert!(matches!(
            build_optimism_split(&dataset, below_everything),
            Err(HarnessError::DegenerateSplit { side: "train", .. })
        ));
    }
}
