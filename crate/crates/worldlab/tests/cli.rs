//! End-to-end checks of the command-line binary: exit codes, config
//! handling, determinism of the written records, and the analyze/plot
//! pipeline over completed runs.

use std::path::Path;
use std::process::{Command, Output};

fn worldlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_worldlab"))
        .args(args)
        .env_remove("WORLDLAB_OUT")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary should spawn")
}

fn write_tiny_config(path: &Path, extra: &str) {
    let base = "\
task = pendulum_swingup
design = oracle
seed = 5
image_size = 16
episode_steps = 6
prediction_horizon = 3
cem.horizon = 3
cem.iterations = 2
cem.candidates = 6
cem.elites = 2
seed_episodes = 1
total_episodes = 2
steps_per_iteration = 1
batch_size = 2
eval_every = 1
offline_steps = 3
offline_eval_episodes = 2
error_stride = 2
";
    std::fs::write(path, format!("{base}{extra}")).unwrap();
}

#[test]
fn unknown_commands_exit_2_with_usage() {
    let out = worldlab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr was: {stderr}");
}

#[test]
fn malformed_configs_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write_tiny_config(&cfg, "cem.explorers = 3\n");
    let out = worldlab(&["train-online", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cem.explorers"), "stderr was: {stderr}");

    let out = worldlab(&["train-online", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_online_runs_write_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    write_tiny_config(&cfg, "");
    for out_dir in [&out_a, &out_b] {
        let out = worldlab(&[
            "train-online",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            &format!("out_dir={}", out_dir.display()),
            "--set",
            "seed=7",
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = "oracle_pendulum_swingup_seed7";
    // records must match apart from the out_dir baked into the snapshot
    let record_a = std::fs::read_to_string(out_a.join(run).join("record.json")).unwrap();
    let record_b = std::fs::read_to_string(out_b.join(run).join("record.json")).unwrap();
    assert_eq!(
        record_a.replace(&out_a.display().to_string(), "X"),
        record_b.replace(&out_b.display().to_string(), "X"),
    );
    let data_a = std::fs::read(out_a.join(run).join("dataset.wlds")).unwrap();
    let data_b = std::fs::read(out_b.join(run).join("dataset.wlds")).unwrap();
    assert_eq!(data_a, data_b);
    for file in ["config.cfg", "timing.json", "metrics.jsonl", "evals.csv", "losses.csv", "model.ckpt"] {
        assert!(out_a.join(run).join(file).is_file(), "missing {file}");
    }
}

#[test]
fn rerunning_from_the_snapshot_reproduces_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out_dir = dir.path().join("out");
    write_tiny_config(&cfg, &format!("out_dir = {}\n", out_dir.display()));

    let out =
        worldlab(&["train-online", "--config", cfg.to_str().unwrap(), "--set", "seed=11"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let run_dir = out_dir.join("oracle_pendulum_swingup_seed11");
    let first = std::fs::read_to_string(run_dir.join("record.json")).unwrap();

    let snapshot = run_dir.join("config.cfg");
    let out = worldlab(&["train-online", "--config", snapshot.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let second = std::fs::read_to_string(run_dir.join("record.json")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn collect_offline_analyze_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out_dir = dir.path().join("out");
    write_tiny_config(&cfg, &format!("out_dir = {}\ncollect.episodes = 5\n", out_dir.display()));

    let out = worldlab(&["collect", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let dataset = out_dir.join("collect_oracle_pendulum_swingup_seed5").join("dataset.wlds");
    assert!(dataset.is_file());

    for seed in ["1", "2"] {
        let out = worldlab(&[
            "train-offline",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "design=r_recurrent",
            "--set",
            &format!("seed={seed}"),
            "--set",
            &format!("dataset={}", dataset.display()),
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        let run_dir = out_dir.join(format!("offline_r_recurrent_pendulum_swingup_seed{seed}"));
        assert!(run_dir.join("record.json").is_file());
        assert!(run_dir.join("model.ckpt").is_file());
    }

    let out = worldlab(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "scale,image_loss,reward_loss,score_mean,score_stddev");
    assert!(lines.last().unwrap().starts_with("rho,"));

    let out = worldlab(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "design=r_recurrent",
        "--set",
        &format!(
            "checkpoint={}",
            out_dir.join("offline_r_recurrent_pendulum_swingup_seed1").join("model.ckpt").display()
        ),
        "--set",
        "eval.episodes=2",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let evals = std::fs::read_to_string(
        out_dir.join("eval_r_recurrent_pendulum_swingup_seed5").join("evals.csv"),
    )
    .unwrap();
    assert_eq!(evals.lines().count(), 3);

    let out = worldlab(&["plot", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("fig2_curves.svg").is_file());
    assert!(out_dir.join("fig3_hist.svg").is_file());
    assert!(out_dir.join("fig9_heatmap.svg").is_file());
}
