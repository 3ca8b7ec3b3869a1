//! Config-driven command-line front end. Every command reads one flat
//! key-value config file plus `--set` overrides, writes a resolved snapshot
//! next to its outputs, and never touches files outside the output
//! directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{
    self, moving_average, plot_curves_svg, plot_heatmap_svg, plot_histogram_svg,
    reward_heatmap, reward_histogram, scale_sweep_report, write_curve_csv, write_sweep_csv, Curve,
};
use crate::envs::{Env, Task};
use crate::harness::{
    self, aggregate, collect_random_episode, run_offline, run_online, subseed, wlds, Dataset,
    DatasetEntry, EvalPoint, Mode, Partition, RunConfig, RunRecord,
};
use crate::models::{
    build_model, GradNorms, LossMaskSpec, LossReport, ModelDesign, PredictionErrors,
};
use crate::planner;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed configuration; the message names the offending key path.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config { .. } => 2,
            Self::Runtime(_) => 1,
        }
    }

    fn runtime(err: impl std::fmt::Display) -> Self {
        Self::Runtime(err.to_string())
    }
}

#[derive(Parser)]
#[command(name = "worldlab", version, about = "World-model experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train while collecting episodes from the environment.
    TrainOnline(RunArgs),
    /// Train on a fixed dataset file, then evaluate.
    TrainOffline(RunArgs),
    /// Record random-action episodes into a dataset file.
    Collect(RunArgs),
    /// Score planner evaluation episodes, optionally from a checkpoint.
    Eval(RunArgs),
    /// Summarize completed runs into the capacity-sweep table.
    Analyze(RunArgs),
    /// Render the standard figures from completed runs.
    Plot(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, e.g. --set seed=7. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Evaluation worker threads.
    #[arg(long, value_name = "N")]
    parallel_eval: Option<usize>,
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("worldlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (args, run): (&RunArgs, fn(&ExperimentConfig) -> Result<(), CliError>) =
        match &cli.command {
            Command::TrainOnline(a) => (a, cmd_train_online),
            Command::TrainOffline(a) => (a, cmd_train_offline),
            Command::Collect(a) => (a, cmd_collect),
            Command::Eval(a) => (a, cmd_eval),
            Command::Analyze(a) => (a, cmd_analyze),
            Command::Plot(a) => (a, cmd_plot),
        };
    let mut exp = ExperimentConfig::load(&args.config, &args.sets)?;
    if let Some(n) = args.parallel_eval {
        exp.run.parallel_eval = n;
    }
    run(&exp)
}

/// Everything a command needs: the run configuration plus file-level
/// settings that live outside `RunConfig`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub out_dir: PathBuf,
    /// Input dataset file for the fixed-dataset protocol and plots.
    pub dataset: Option<PathBuf>,
    /// Parameters to load before evaluating or plotting.
    pub checkpoint: Option<PathBuf>,
    pub collect_episodes: u32,
    pub eval_episodes: u32,
}

impl ExperimentConfig {
    pub fn load(path: &Path, sets: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            key: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut map = parse_config_text(&text)?;
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| CliError::Config {
                key: s.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut r = KeyReader { map };
        let task = Task::parse(&r.required("task")?)
            .map_err(|e| CliError::Config { key: "task".into(), message: e.to_string() })?;
        let design = ModelDesign::parse(&r.required("design")?)
            .map_err(|e| CliError::Config { key: "design".into(), message: e.to_string() })?;
        let seed = parse_val("seed", &r.required("seed")?)?;
        let mut run = RunConfig::new(design, task, seed);

        r.opt("image_size", &mut run.image_size)?;
        r.opt("scale_level", &mut run.scale_level)?;
        r.opt("context_length", &mut run.context_length)?;
        r.opt("prediction_horizon", &mut run.prediction_horizon)?;
        r.opt("action_repeat", &mut run.action_repeat)?;
        r.opt("episode_steps", &mut run.episode_steps)?;
        r.opt("total_episodes", &mut run.total_episodes)?;
        r.opt("seed_episodes", &mut run.seed_episodes)?;
        r.opt("steps_per_iteration", &mut run.steps_per_iteration)?;
        r.opt("batch_size", &mut run.batch_size)?;
        r.opt("eval_every", &mut run.eval_every)?;
        r.opt("noise_stddev", &mut run.noise_stddev)?;
        r.opt("offline_steps", &mut run.offline_steps)?;
        r.opt("offline_eval_episodes", &mut run.offline_eval_episodes)?;
        r.opt("error_stride", &mut run.error_stride)?;
        r.opt("parallel_eval", &mut run.parallel_eval)?;
        r.opt("grad_diag_every", &mut run.grad_diag_every)?;
        r.opt("cem.horizon", &mut run.cem.horizon)?;
        r.opt("cem.iterations", &mut run.cem.iterations)?;
        r.opt("cem.candidates", &mut run.cem.candidates)?;
        r.opt("cem.elites", &mut run.cem.elites)?;
        r.opt("cem.init_stddev", &mut run.cem.init_stddev)?;
        r.opt("cem.stddev_floor", &mut run.cem.stddev_floor)?;

        let mask_kind = r.take("mask.kind");
        let mask_fraction = r.take("mask.fraction");
        if let Some(kind) = mask_kind {
            let fraction = match mask_fraction {
                Some(raw) => parse_val("mask.fraction", &raw)?,
                None => 1.0,
            };
            run.loss_mask = LossMaskSpec::parse(&kind, fraction)
                .map_err(|e| CliError::Config { key: "mask.kind".into(), message: e.to_string() })?;
        } else if mask_fraction.is_some() {
            return Err(CliError::Config {
                key: "mask.fraction".into(),
                message: "set without mask.kind".into(),
            });
        }

        run.beta = r.opt_value("loss.beta")?;
        run.free_nats = r.opt_value("loss.free_nats")?;
        run.reward_loss_multiplier = r.opt_value("loss.reward_multiplier")?;
        run.latent_sharing = r.opt_value("loss.latent_sharing")?;

        let out_dir = r
            .take("out_dir")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("WORLDLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let dataset = r.take("dataset").map(PathBuf::from);
        let checkpoint = r.take("checkpoint").map(PathBuf::from);
        let mut collect_episodes = 10u32;
        r.opt("collect.episodes", &mut collect_episodes)?;
        let mut eval_episodes = 10u32;
        r.opt("eval.episodes", &mut eval_episodes)?;
        r.finish()?;

        Ok(Self { run, out_dir, dataset, checkpoint, collect_episodes, eval_episodes })
    }

    /// The resolved configuration as ordered key-value pairs, the exact
    /// content of the snapshot written next to every command's outputs.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let r = &self.run;
        let mut kv: Vec<(String, String)> = vec![
            ("task".into(), r.task.id().into()),
            ("design".into(), r.design.id().into()),
            ("seed".into(), r.seed.to_string()),
            ("image_size".into(), r.image_size.to_string()),
            ("scale_level".into(), r.scale_level.to_string()),
            ("context_length".into(), r.context_length.to_string()),
            ("prediction_horizon".into(), r.prediction_horizon.to_string()),
            ("action_repeat".into(), r.action_repeat.to_string()),
            ("episode_steps".into(), r.episode_steps.to_string()),
            ("total_episodes".into(), r.total_episodes.to_string()),
            ("seed_episodes".into(), r.seed_episodes.to_string()),
            ("steps_per_iteration".into(), r.steps_per_iteration.to_string()),
            ("batch_size".into(), r.batch_size.to_string()),
            ("eval_every".into(), r.eval_every.to_string()),
            ("noise_stddev".into(), r.noise_stddev.to_string()),
            ("offline_steps".into(), r.offline_steps.to_string()),
            ("offline_eval_episodes".into(), r.offline_eval_episodes.to_string()),
            ("error_stride".into(), r.error_stride.to_string()),
            ("parallel_eval".into(), r.parallel_eval.to_string()),
            ("grad_diag_every".into(), r.grad_diag_every.to_string()),
            ("cem.horizon".into(), r.cem.horizon.to_string()),
            ("cem.iterations".into(), r.cem.iterations.to_string()),
            ("cem.candidates".into(), r.cem.candidates.to_string()),
            ("cem.elites".into(), r.cem.elites.to_string()),
            ("cem.init_stddev".into(), r.cem.init_stddev.to_string()),
            ("cem.stddev_floor".into(), r.cem.stddev_floor.to_string()),
            ("mask.kind".into(), r.loss_mask.id().into()),
        ];
        match r.loss_mask {
            LossMaskSpec::None => {}
            LossMaskSpec::Crop(f) | LossMaskSpec::Resize(f) => {
                kv.push(("mask.fraction".into(), f.to_string()));
            }
        }
        if let Some(v) = r.beta {
            kv.push(("loss.beta".into(), v.to_string()));
        }
        if let Some(v) = r.free_nats {
            kv.push(("loss.free_nats".into(), v.to_string()));
        }
        if let Some(v) = r.reward_loss_multiplier {
            kv.push(("loss.reward_multiplier".into(), v.to_string()));
        }
        if let Some(v) = r.latent_sharing {
            kv.push(("loss.latent_sharing".into(), v.to_string()));
        }
        kv.push(("out_dir".into(), self.out_dir.display().to_string()));
        if let Some(p) = &self.dataset {
            kv.push(("dataset".into(), p.display().to_string()));
        }
        if let Some(p) = &self.checkpoint {
            kv.push(("checkpoint".into(), p.display().to_string()));
        }
        kv.push(("collect.episodes".into(), self.collect_episodes.to_string()));
        kv.push(("eval.episodes".into(), self.eval_episodes.to_string()));
        kv
    }
}

fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
            key: format!("line {}", n + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Config {
                key: format!("line {}", n + 1),
                message: "empty key".into(),
            });
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Config { key, message: "duplicate key".into() });
        }
    }
    Ok(map)
}

fn parse_val<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| CliError::Config { key: key.into(), message: format!("{e}") })
}

struct KeyReader {
    map: BTreeMap<String, String>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key)
            .ok_or_else(|| CliError::Config { key: key.into(), message: "required key missing".into() })
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(raw) = self.take(key) {
            *slot = parse_val(key, &raw)?;
        }
        Ok(())
    }

    fn opt_value<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key).map(|raw| parse_val(key, &raw)).transpose()
    }

    fn finish(self) -> Result<(), CliError> {
        match self.map.into_keys().next() {
            Some(key) => Err(CliError::Config { key, message: "unknown key".into() }),
            None => Ok(()),
        }
    }
}

fn write_snapshot(path: &Path, kv: &[(String, String)]) -> Result<(), CliError> {
    let mut out = String::new();
    for (k, v) in kv {
        writeln!(out, "{k} = {v}").unwrap();
    }
    std::fs::write(path, out).map_err(CliError::runtime)
}

fn make_run_dir(exp: &ExperimentConfig, prefix: &str) -> Result<PathBuf, CliError> {
    let r = &exp.run;
    let dir = exp
        .out_dir
        .join(format!("{prefix}{}_{}_seed{}", r.design.id(), r.task.id(), r.seed));
    std::fs::create_dir_all(&dir).map_err(CliError::runtime)?;
    write_snapshot(&dir.join("config.cfg"), &exp.snapshot())?;
    Ok(dir)
}

fn loss_json(l: &LossReport) -> Value {
    let mut obj = json!({
        "total": l.total,
        "image_nll": l.image_nll,
        "kl": l.kl,
        "reward_loss": l.reward_loss,
    });
    if let Some(g) = l.grad_norms {
        obj["grad_image"] = json!(g.image);
        obj["grad_kl"] = json!(g.kl);
        obj["grad_reward"] = json!(g.reward);
    }
    obj
}

fn record_json(record: &RunRecord, snapshot: &[(String, String)]) -> Value {
    let config: serde_json::Map<String, Value> =
        snapshot.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
    json!({
        "config": config,
        "evals": record.evals.iter().map(|e| json!({"env_frames": e.env_frames, "score": e.score})).collect::<Vec<_>>(),
        "losses": record.losses.iter().map(loss_json).collect::<Vec<_>>(),
        "env_frames": record.env_frames,
        "score_p90": record.score_p90,
        "eval_errors": record.eval_errors.map(|e| json!({"image": e.image, "reward": e.reward})),
    })
}

/// Rebuilds the deterministic part of a run record from its JSON file; the
/// timing fields live in the sidecar and come back as zero.
pub fn load_record(path: &Path) -> Result<RunRecord, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::runtime)?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let bad = || CliError::Runtime(format!("{}: malformed record", path.display()));
    let config_map: BTreeMap<String, String> = v["config"]
        .as_object()
        .ok_or_else(bad)?
        .iter()
        .map(|(k, val)| Ok((k.clone(), val.as_str().ok_or_else(bad)?.to_string())))
        .collect::<Result<_, CliError>>()?;
    let exp = ExperimentConfig::from_map(config_map)?;
    let evals = v["evals"]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|e| {
            Ok(EvalPoint {
                env_frames: e["env_frames"].as_u64().ok_or_else(bad)?,
                score: e["score"].as_f64().ok_or_else(bad)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let losses = v["losses"]
        .as_array()
        .ok_or_else(bad)?
        .iter()
        .map(|l| {
            let grad_norms = match l.get("grad_image") {
                Some(val) => Some(GradNorms {
                    image: val.as_f64().ok_or_else(bad)?,
                    kl: l["grad_kl"].as_f64().ok_or_else(bad)?,
                    reward: l["grad_reward"].as_f64().ok_or_else(bad)?,
                }),
                None => None,
            };
            Ok(LossReport {
                total: l["total"].as_f64().ok_or_else(bad)?,
                image_nll: l["image_nll"].as_f64().ok_or_else(bad)?,
                kl: l["kl"].as_f64().ok_or_else(bad)?,
                reward_loss: l["reward_loss"].as_f64().ok_or_else(bad)?,
                grad_norms,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let eval_errors = match &v["eval_errors"] {
        Value::Null => None,
        e => Some(PredictionErrors {
            image: e["image"].as_f64(),
            reward: e["reward"].as_f64().ok_or_else(bad)?,
        }),
    };
    Ok(RunRecord {
        config: exp.run,
        evals,
        losses,
        env_frames: v["env_frames"].as_u64().ok_or_else(bad)?,
        score_p90: v["score_p90"].as_f64(),
        eval_errors,
        train_seconds: 0.0,
        episode_seconds: 0.0,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::runtime)
}

fn write_run_outputs(
    dir: &Path,
    exp: &ExperimentConfig,
    record: &RunRecord,
) -> Result<(), CliError> {
    write_json(dir.join("record.json").as_path(), &record_json(record, &exp.snapshot()))?;
    write_json(
        dir.join("timing.json").as_path(),
        &json!({
            "train_seconds": record.train_seconds,
            "episode_seconds": record.episode_seconds,
        }),
    )?;

    let mut jsonl = String::new();
    for (i, l) in record.losses.iter().enumerate() {
        let mut obj = loss_json(l);
        obj["event"] = json!("loss");
        obj["iteration"] = json!(i + 1);
        writeln!(jsonl, "{obj}").unwrap();
    }
    for e in &record.evals {
        writeln!(jsonl, "{}", json!({"event": "eval", "env_frames": e.env_frames, "score": e.score}))
            .unwrap();
    }
    if record.score_p90.is_some() || record.eval_errors.is_some() {
        let errors = record.eval_errors.map(|e| json!({"image": e.image, "reward": e.reward}));
        writeln!(
            jsonl,
            "{}",
            json!({
                "event": "summary",
                "env_frames": record.env_frames,
                "score_p90": record.score_p90,
                "eval_errors": errors,
            })
        )
        .unwrap();
    }
    std::fs::write(dir.join("metrics.jsonl"), jsonl).map_err(CliError::runtime)?;

    let mut evals_csv = String::from("env_frames,score\n");
    for e in &record.evals {
        writeln!(evals_csv, "{},{}", e.env_frames, e.score).unwrap();
    }
    std::fs::write(dir.join("evals.csv"), evals_csv).map_err(CliError::runtime)?;

    let mut losses_csv = String::from("iteration,total,image_nll,kl,reward_loss\n");
    for (i, l) in record.losses.iter().enumerate() {
        writeln!(losses_csv, "{},{},{},{},{}", i + 1, l.total, l.image_nll, l.kl, l.reward_loss)
            .unwrap();
    }
    std::fs::write(dir.join("losses.csv"), losses_csv).map_err(CliError::runtime)?;
    Ok(())
}

fn cmd_train_online(exp: &ExperimentConfig) -> Result<(), CliError> {
    let dir = make_run_dir(exp, "")?;
    let (record, dataset, model) = run_online(&exp.run).map_err(CliError::runtime)?;
    write_run_outputs(&dir, exp, &record)?;
    wlds::save_dataset(&dataset, &dir.join("dataset.wlds")).map_err(CliError::runtime)?;
    model.save(&dir.join("model.ckpt")).map_err(CliError::runtime)?;
    log::info!(
        "online run finished: {} episodes, {} frames, outputs in {}",
        dataset.len(),
        record.env_frames,
        dir.display()
    );
    Ok(())
}

fn cmd_train_offline(exp: &ExperimentConfig) -> Result<(), CliError> {
    let input = exp.dataset.as_ref().ok_or_else(|| CliError::Config {
        key: "dataset".into(),
        message: "required for train-offline".into(),
    })?;
    let dataset = wlds::load_dataset(input).map_err(CliError::runtime)?;
    let dir = make_run_dir(exp, "offline_")?;
    let (record, model) = run_offline(&exp.run, &dataset).map_err(CliError::runtime)?;
    write_run_outputs(&dir, exp, &record)?;
    model.save(&dir.join("model.ckpt")).map_err(CliError::runtime)?;
    log::info!(
        "offline run finished: p90 score {:.3}, outputs in {}",
        record.score_p90.unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn cmd_collect(exp: &ExperimentConfig) -> Result<(), CliError> {
    let dir = make_run_dir(exp, "collect_")?;
    let r = &exp.run;
    let env = Env::new(r.task).with_image_size(r.image_size).with_episode_steps(r.episode_steps);
    let entries = (0..exp.collect_episodes)
        .map(|i| DatasetEntry {
            episode: collect_random_episode(
                &env,
                r.action_repeat,
                subseed(r.seed, harness::LANE_SEED_EPISODES, i as u64),
            ),
            provenance: format!("collect/seed{}/random", r.seed),
            partition: Partition::Train,
        })
        .collect();
    let dataset = aggregate(&[Dataset { entries }], r.seed).map_err(CliError::runtime)?;
    let path = dir.join("dataset.wlds");
    wlds::save_dataset(&dataset, &path).map_err(CliError::runtime)?;
    log::info!("collected {} random episodes into {}", dataset.len(), path.display());
    Ok(())
}

fn cmd_eval(exp: &ExperimentConfig) -> Result<(), CliError> {
    exp.run.validate().map_err(CliError::runtime)?;
    let dir = make_run_dir(exp, "eval_")?;
    let r = &exp.run;
    let mcfg = r.model_config();
    let mut model =
        build_model(&mcfg, subseed(r.seed, harness::LANE_MODEL, 0)).map_err(CliError::runtime)?;
    if let Some(ckpt) = &exp.checkpoint {
        model.load(ckpt).map_err(CliError::runtime)?;
    }
    let env = Env::new(r.task).with_image_size(r.image_size).with_episode_steps(r.episode_steps);
    let mut scores = Vec::new();
    let mut csv = String::from("episode,score\n");
    for i in 0..exp.eval_episodes {
        let ep = planner::mpc_episode(
            &env,
            &model,
            &r.cem,
            r.noise_stddev,
            Mode::Eval,
            subseed(r.seed, harness::LANE_OFFLINE_EVAL, i as u64),
        )
        .map_err(CliError::runtime)?;
        writeln!(csv, "{},{}", i, ep.score()).unwrap();
        scores.push(ep.score());
    }
    std::fs::write(dir.join("evals.csv"), csv).map_err(CliError::runtime)?;
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let p90 = analysis::percentile(&scores, 90.0).map_err(CliError::runtime)?;
    write_json(
        dir.join("eval_summary.json").as_path(),
        &json!({"episodes": scores.len(), "score_mean": mean, "score_p90": p90}),
    )?;
    log::info!("evaluated {} episodes: mean {:.3}, p90 {:.3}", scores.len(), mean, p90);
    Ok(())
}

/// Completed run directories under the output root, sorted by name.
fn scan_run_dirs(out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    for entry in entries {
        let path = entry.map_err(CliError::runtime)?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn cmd_analyze(exp: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&exp.out_dir).map_err(CliError::runtime)?;
    write_snapshot(&exp.out_dir.join("analyze_config.cfg"), &exp.snapshot())?;
    let mut records = Vec::new();
    for dir in scan_run_dirs(&exp.out_dir)? {
        let path = dir.join("record.json");
        if path.is_file() {
            records.push(load_record(&path)?);
        }
    }
    if records.is_empty() {
        return Err(CliError::Runtime(format!(
            "no record.json files under {}",
            exp.out_dir.display()
        )));
    }
    let report = scale_sweep_report(&records).map_err(CliError::runtime)?;
    let path = exp.out_dir.join("sweep.csv");
    write_sweep_csv(&report, &path).map_err(CliError::runtime)?;
    log::info!(
        "analyzed {} runs across {} capacity levels into {}",
        records.len(),
        report.rows.len(),
        path.display()
    );
    Ok(())
}

fn cmd_plot(exp: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&exp.out_dir).map_err(CliError::runtime)?;
    write_snapshot(&exp.out_dir.join("plot_config.cfg"), &exp.snapshot())?;
    let dirs = scan_run_dirs(&exp.out_dir)?;
    let hi = exp.run.action_repeat as f64;
    let bins = 40;
    let mut wrote = Vec::new();

    let mut curves = Vec::new();
    for dir in &dirs {
        let path = dir.join("record.json");
        if !path.is_file() {
            continue;
        }
        let record = load_record(&path)?;
        if record.evals.is_empty() {
            continue;
        }
        let x: Vec<f64> = record.evals.iter().map(|e| e.env_frames as f64).collect();
        let y: Vec<f64> = record.evals.iter().map(|e| e.score).collect();
        let label = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let curve = Curve::new(x, y, None).map_err(CliError::runtime)?;
        curves.push((label, moving_average(&curve, 10).map_err(CliError::runtime)?));
    }
    if !curves.is_empty() {
        let path = exp.out_dir.join("fig2_curves.svg");
        plot_curves_svg(&curves, &path).map_err(CliError::runtime)?;
        write_curve_csv(&curves[0].1, &exp.out_dir.join("fig2_curve0.csv"))
            .map_err(CliError::runtime)?;
        wrote.push(path);
    }

    let named_dataset = exp.dataset.clone();
    let found_dataset = named_dataset.or_else(|| {
        dirs.iter().map(|d| d.join("dataset.wlds")).find(|p| p.is_file())
    });
    if let Some(path) = &found_dataset {
        let dataset = wlds::load_dataset(path).map_err(CliError::runtime)?;
        let seqs: Vec<_> = dataset.entries.iter().map(|e| &e.episode.sequence).collect();
        let counts =
            reward_histogram(seqs.iter().copied(), bins, hi).map_err(CliError::runtime)?;
        let out = exp.out_dir.join("fig3_hist.svg");
        plot_histogram_svg(&counts, hi, &out).map_err(CliError::runtime)?;
        analysis::write_histogram_csv(&counts, hi, &exp.out_dir.join("fig3_hist.csv"))
            .map_err(CliError::runtime)?;
        wrote.push(out);
    }

    // the heatmap needs a trained model next to a dataset: rebuild from that
    // run's own snapshot so the architecture matches the checkpoint
    for dir in &dirs {
        let ckpt = dir.join("model.ckpt");
        let cfg = dir.join("config.cfg");
        let data = dir.join("dataset.wlds").is_file().then(|| dir.join("dataset.wlds"));
        let data = data.or_else(|| found_dataset.clone());
        let (Some(data), true, true) = (data, ckpt.is_file(), cfg.is_file()) else {
            continue;
        };
        let run_exp = ExperimentConfig::load(&cfg, &[])?;
        let mcfg = run_exp.run.model_config();
        let mut model = build_model(&mcfg, subseed(run_exp.run.seed, harness::LANE_MODEL, 0))
            .map_err(CliError::runtime)?;
        model.load(&ckpt).map_err(CliError::runtime)?;
        let dataset = wlds::load_dataset(&data).map_err(CliError::runtime)?;
        let eval_pool = dataset.partition_sequences(Partition::Eval);
        let pool = if eval_pool.is_empty() {
            dataset.entries.iter().map(|e| &e.episode.sequence).collect()
        } else {
            eval_pool
        };
        let pairs = model
            .reward_pairs(pool.iter().copied(), run_exp.run.error_stride)
            .map_err(CliError::runtime)?;
        if pairs.is_empty() {
            continue;
        }
        let (predicted, actual): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let grid = reward_heatmap(&predicted, &actual, bins, hi).map_err(CliError::runtime)?;
        let out = exp.out_dir.join("fig9_heatmap.svg");
        plot_heatmap_svg(&grid, &out).map_err(CliError::runtime)?;
        analysis::write_heatmap_csv(&grid, &exp.out_dir.join("fig9_heatmap.csv"))
            .map_err(CliError::runtime)?;
        wrote.push(out);
        break;
    }

    if wrote.is_empty() {
        return Err(CliError::Runtime(format!(
            "nothing to plot under {}",
            exp.out_dir.display()
        )));
    }
    log::info!(
        "wrote {}",
        wrote.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_map() -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("task".to_string(), "pendulum_swingup".to_string());
        m.insert("design".to_string(), "ltlr".to_string());
        m.insert("seed".to_string(), "7".to_string());
        m
    }

    #[test]
    fn config_text_parses_comments_and_sections() {
        let text = "# a comment\n\ntask = pendulum_swingup\ncem.horizon = 12\n  design=ltlr  \n";
        let map = parse_config_text(text).unwrap();
        assert_eq!(map.len(), 3);
        assert_eq!(map["cem.horizon"], "12");
        assert_eq!(map["design"], "ltlr");
    }

    #[test]
    fn malformed_lines_name_their_position() {
        let err = parse_config_text("task = x\nnonsense\n").unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key, "line 2"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_config_text("a = 1\na = 2\n").unwrap_err();
        match err {
            CliError::Config { key, message } => {
                assert_eq!(key, "a");
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_by_path() {
        let mut map = base_map();
        map.insert("cem.explorers".to_string(), "3".to_string());
        let err = ExperimentConfig::from_map(map).unwrap_err();
        match err {
            CliError::Config { key, message } => {
                assert_eq!(key, "cem.explorers");
                assert!(message.contains("unknown"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(err_code(&CliError::Config { key: "x".into(), message: "m".into() }), 2);
    }

    fn err_code(e: &CliError) -> u8 {
        e.exit_code()
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut map = base_map();
        map.insert("batch_size".to_string(), "lots".to_string());
        match ExperimentConfig::from_map(map).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "batch_size"),
            other => panic!("unexpected {other:?}"),
        }
        let mut map = base_map();
        map.insert("mask.fraction".to_string(), "0.5".to_string());
        match ExperimentConfig::from_map(map).unwrap_err() {
            CliError::Config { key, .. } => assert_eq!(key, "mask.fraction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn snapshots_round_trip_to_the_same_config() {
        let mut map = base_map();
        map.insert("mask.kind".to_string(), "crop".to_string());
        map.insert("mask.fraction".to_string(), "0.25".to_string());
        map.insert("loss.beta".to_string(), "0.002".to_string());
        map.insert("noise_stddev".to_string(), "0.17".to_string());
        map.insert("cem.candidates".to_string(), "64".to_string());
        map.insert("out_dir".to_string(), "scratch/run1".to_string());
        map.insert("dataset".to_string(), "scratch/pool.wlds".to_string());
        let exp = ExperimentConfig::from_map(map).unwrap();
        assert_eq!(exp.run.loss_mask, LossMaskSpec::Crop(0.25));
        assert_eq!(exp.run.beta, Some(0.002));
        assert_eq!(exp.run.cem.candidates, 64);

        let rebuilt =
            ExperimentConfig::from_map(exp.snapshot().into_iter().collect()).unwrap();
        assert_eq!(exp, rebuilt);
    }

    #[test]
    fn set_overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "task = pendulum_swingup\ndesign = ltlr\nseed = 1\n").unwrap();
        let exp =
            ExperimentConfig::load(&path, &["seed=9".to_string(), "batch_size = 4".to_string()])
                .unwrap();
        assert_eq!(exp.run.seed, 9);
        assert_eq!(exp.run.batch_size, 4);
    }

    #[test]
    fn records_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = base_map();
        map.insert("out_dir".to_string(), dir.path().display().to_string());
        let exp = ExperimentConfig::from_map(map).unwrap();
        let record = RunRecord {
            config: exp.run.clone(),
            evals: vec![
                EvalPoint { env_frames: 72, score: 1.25 },
                EvalPoint { env_frames: 144, score: 0.1 + 0.2 },
            ],
            losses: vec![LossReport {
                total: 1.0 / 3.0,
                image_nll: 0.25,
                kl: 0.05,
                reward_loss: 1e-9,
                grad_norms: Some(GradNorms { image: 1.0, kl: 2.0, reward: 3.0 }),
            }],
            env_frames: 288,
            score_p90: Some(1.5),
            eval_errors: Some(PredictionErrors { image: None, reward: 0.0 }),
            train_seconds: 5.0,
            episode_seconds: 2.0,
        };
        let path = dir.path().join("record.json");
        write_json(&path, &record_json(&record, &exp.snapshot())).unwrap();
        let loaded = load_record(&path).unwrap();
        assert!(loaded.same_outcome(&record));
        assert_eq!(loaded.train_seconds, 0.0);
    }
}
