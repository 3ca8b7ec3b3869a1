//! Binary episode-dataset files. Little-endian throughout: a `WLDS` magic,
//! a format version, then per episode the task id, seed, step count, image
//! side, observations, actions, rewards, mode byte, provenance string, and
//! partition byte. Simulator states and wall-clock timings are deliberately
//! not persisted; reloaded episodes carry empty states and zeroed timings.

use std::path::Path;

use thiserror::Error;

use crate::envs::Task;
use crate::models::Sequence;
use crate::tensor::Tensor;

use super::{Dataset, DatasetEntry, Episode, Mode, Partition};

const MAGIC: [u8; 4] = *b"WLDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WldsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("file ends inside {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last episode")]
    TrailingBytes(usize),
    #[error("invalid {field} byte {value}")]
    BadByte { field: &'static str, value: u8 },
    #[error("unknown task id {0:?}")]
    UnknownTask(String),
    #[error("{0} is not valid utf-8")]
    BadString(&'static str),
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), WldsError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.entries.len() as u32).to_le_bytes());
    for entry in &dataset.entries {
        let ep = &entry.episode;
        let seq = &ep.sequence;
        let steps = seq.steps();
        let side = seq.observations.first().map_or(0, |o| o.shape[0]);
        write_string(&mut out, ep.task.id());
        out.extend_from_slice(&ep.seed.to_le_bytes());
        out.extend_from_slice(&(steps as u32).to_le_bytes());
        out.extend_from_slice(&(side as u32).to_le_bytes());
        for obs in &seq.observations {
            for &v in &obs.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for action in &seq.actions {
            for &v in action {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &r in &seq.rewards[1..] {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out.push(match ep.mode {
            Mode::Train => 0,
            Mode::Eval => 1,
        });
        write_string(&mut out, &entry.provenance);
        out.push(match entry.partition {
            Partition::Train => 0,
            Partition::Eval => 1,
        });
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, WldsError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(WldsError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WldsError::BadVersion(version));
    }
    let count = r.u32("episode count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let task_id = r.string("task id")?;
        let task = Task::parse(&task_id).map_err(|_| WldsError::UnknownTask(task_id))?;
        let seed = r.u64("seed")?;
        let steps = r.u32("step count")? as usize;
        let side = r.u32("image side")? as usize;
        let pixels = side
            .checked_mul(side)
            .and_then(|p| p.checked_mul(3))
            .ok_or(WldsError::Truncated("image side"))?;
        let mut observations = Vec::new();
        for _ in 0..steps + 1 {
            observations.push(Tensor::new(vec![side, side, 3], r.f64s(pixels, "observations")?));
        }
        let adim = task.action_dim();
        let mut actions = Vec::new();
        for _ in 0..steps {
            actions.push(r.f64s(adim, "actions")?);
        }
        let mut rewards = r.f64s(steps, "rewards")?;
        rewards.insert(0, 0.0);
        let mode = match r.byte("mode")? {
            0 => Mode::Train,
            1 => Mode::Eval,
            value => return Err(WldsError::BadByte { field: "mode", value }),
        };
        let provenance = r.string("provenance")?;
        let partition = match r.byte("partition")? {
            0 => Partition::Train,
            1 => Partition::Eval,
            value => return Err(WldsError::BadByte { field: "partition", value }),
        };
        entries.push(DatasetEntry {
            episode: Episode {
                task,
                seed,
                mode,
                sequence: Sequence {
                    observations,
                    actions,
                    rewards,
                    states: Vec::new(),
                },
                step_seconds: vec![0.0; steps],
                truncated: false,
            },
            provenance,
            partition,
        });
    }
    if r.pos != bytes.len() {
        return Err(WldsError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Dataset { entries })
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WldsError> {
        let end = self.pos.checked_add(n).ok_or(WldsError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(WldsError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn byte(&mut self, what: &'static str) -> Result<u8, WldsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WldsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, WldsError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, WldsError> {
        let raw = self.take(n.checked_mul(8).ok_or(WldsError::Truncated(what))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self, what: &'static str) -> Result<String, WldsError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WldsError::BadString(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Env;
    use crate::harness::collect_random_episode;
    use proptest::prelude::*;

    fn sample_dataset() -> Dataset {
        let env = Env::new(Task::PendulumSwingup).with_episode_steps(4).with_image_size(6);
        let entries = (0..3)
            .map(|i| DatasetEntry {
                episode: collect_random_episode(&env, 2, 40 + i),
                provenance: format!("oracle/seed{i}/random"),
                partition: if i == 2 { Partition::Eval } else { Partition::Train },
            })
            .collect();
        let mut d = Dataset { entries };
        d.entries[1].episode.mode = Mode::Eval;
        d
    }

    #[test]
    fn round_trip_preserves_the_persisted_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.wlds");
        let dataset = sample_dataset();
        save_dataset(&dataset, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(dataset.same_content(&loaded));
        assert_eq!(loaded.entries.len(), 3);
        for (a, b) in dataset.entries.iter().zip(&loaded.entries) {
            assert_eq!(a.episode.task, b.episode.task);
            assert_eq!(a.episode.seed, b.episode.seed);
            assert_eq!(a.episode.mode, b.episode.mode);
            assert_eq!(a.episode.sequence.observations, b.episode.sequence.observations);
            assert_eq!(a.episode.sequence.actions, b.episode.sequence.actions);
            assert_eq!(a.episode.sequence.rewards, b.episode.sequence.rewards);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.partition, b.partition);
            assert!(b.episode.sequence.states.is_empty());
            assert_eq!(b.episode.step_seconds, vec![0.0; a.episode.steps()]);
        }
    }

    #[test]
    fn saving_twice_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wlds");
        let b = dir.path().join("b.wlds");
        let dataset = sample_dataset();
        save_dataset(&dataset, &a).unwrap();
        save_dataset(&dataset, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corrupted_headers_raise_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wlds");
        let dataset = sample_dataset();
        save_dataset(&dataset, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(WldsError::BadMagic)));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(WldsError::BadVersion(7))));

        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_dataset(&path), Err(WldsError::Truncated("magic"))));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_dataset(&path), Err(WldsError::Truncated(_))));

        let mut bad = good.clone();
        bad.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(WldsError::TrailingBytes(3))));
    }

    #[test]
    fn bad_mode_and_partition_bytes_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wlds");
        let dataset = sample_dataset();
        save_dataset(&dataset, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // the file ends ...mode, provenance-len, provenance, partition
        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(WldsError::BadByte { field: "partition", value: 9 })
        ));

        let prov_len = dataset.entries[2].provenance.len();
        let mode_at = good.len() - 1 - (4 + prov_len) - 1;
        let mut bad = good.clone();
        bad[mode_at] = 5;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(WldsError::BadByte { field: "mode", value: 5 })
        ));
    }

    #[test]
    fn unknown_task_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wlds");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        let name = b"hexapod_walk";
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(WldsError::UnknownTask(id)) => assert_eq!(id, "hexapod_walk"),
            other => panic!("expected UnknownTask, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_save_is_byte_stable(
            n in 1usize..3,
            steps in 1u32..4,
            side in 2usize..5,
            seed in 0u64..1000,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let first = dir.path().join("first.wlds");
            let second = dir.path().join("second.wlds");
            let env = Env::new(Task::CartpoleBalance)
                .with_episode_steps(steps)
                .with_image_size(side);
            let entries = (0..n)
                .map(|i| DatasetEntry {
                    episode: collect_random_episode(&env, 1, seed + i as u64),
                    provenance: format!("r_conv/seed{i}/train"),
                    partition: Partition::Train,
                })
                .collect();
            let dataset = Dataset { entries };
            save_dataset(&dataset, &first).unwrap();
            let loaded = load_dataset(&first).unwrap();
            prop_assert!(dataset.same_content(&loaded));
            save_dataset(&loaded, &second).unwrap();
            prop_assert_eq!(std::fs::read(first).unwrap(), std::fs::read(second).unwrap());
        }
    }
}
