//! Parameter checkpoints. Binary layout: `WLCK` magic, u32 version, then one
//! record per parameter in name order: name length (u32), name bytes, rank
//! (u32), extents (u32 each), little-endian f64 payload. Round trips are
//! bit-exact because payloads go through to_le_bytes unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {:?}", CHECKPOINT_MAGIC)]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter name is not utf-8")]
    BadName,
    #[error("invalid shape for `{name}`: {reason}")]
    BadShape { name: String, reason: String },
    #[error("duplicate parameter `{0}`")]
    DuplicateName(String),
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &e in &tensor.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let mut params = ParamSet::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;

        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = read_u32(&mut r, "extent")? as usize;
            if e == 0 {
                return Err(CheckpointError::BadShape {
                    name,
                    reason: "zero extent".into(),
                });
            }
            shape.push(e);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact_or(&mut r, &mut buf, "payload")?;
            data.push(f64::from_le_bytes(buf));
        }
        if params.contains(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(what)
        } else {
            CheckpointError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut ps = ParamSet::new();
        ps.insert("enc.w", {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![3, 4], data)
        });
        ps.insert("enc.b", Tensor::new(vec![4], vec![0.0, -0.0, 1e-300, f64::MAX]));
        ps.insert("head.w", Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]));
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wlck");
        let params = sample_params();
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (name, t) in params.iter() {
            let lt = loaded.get(name).unwrap();
            assert_eq!(lt.shape, t.shape);
            let bits_a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = lt.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "payload differs for `{name}`");
        }
    }

    #[test]
    fn corrupt_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wlck");
        save_checkpoint(&path, &sample_params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wlck");
        save_checkpoint(&path, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wlck");
        save_checkpoint(&path, &sample_params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn empty_param_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.wlck");
        save_checkpoint(&path, &ParamSet::new()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.is_empty());
    }
}
