//! Binary checkpoints: model parameters, optimizer moments, and enough run
//! state to resume training bit-for-bit.
//!
//! Layout (all integers little-endian):
//! magic `SDML`, format version, a hash of the run configuration (refusing to
//! resume under a different config), step / epoch counters, the frozen
//! annealing temperature at save time, the best validation metric so far,
//! then a count of named f64 blobs. Each blob is name length, name bytes,
//! value count, raw f64 bits. Values round-trip exactly because they are
//! stored as bits, never formatted.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::features::fnv1a64;
use crate::params::ParamSet;
use crate::trainer::adam::Adam;

const MAGIC: &[u8; 4] = b"SDML";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint parameters do not match the model: {0}")]
    ParamMismatch(String),
}

/// Everything a resumed run needs beyond the parameter values themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub step: u64,
    pub epochs_done: u64,
    pub gamma: f64,
    pub best_metric: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub state: RunState,
    pub blobs: Vec<(String, Vec<f64>)>,
}

/// Stable hash of a run configuration's canonical string form.
pub fn config_hash(canonical: &str) -> u64 {
    fnv1a64(canonical.as_bytes())
}

impl Checkpoint {
    /// Capture parameters and optimizer moments. Moment blobs are named
    /// `adam.m.{param}` / `adam.v.{param}`.
    pub fn capture(config_hash: u64, state: RunState, params: &ParamSet, opt: &Adam) -> Self {
        let mut blobs = Vec::new();
        for entry in params.iter() {
            blobs.push((entry.name.clone(), entry.values.clone()));
        }
        let (m, v) = opt.moments();
        for (entry, buf) in params.iter().zip(m) {
            blobs.push((format!("adam.m.{}", entry.name), buf.clone()));
        }
        for (entry, buf) in params.iter().zip(v) {
            blobs.push((format!("adam.v.{}", entry.name), buf.clone()));
        }
        Checkpoint { config_hash, state, blobs }
    }

    /// Write parameter values into a freshly built model, ignoring optimizer
    /// state — enough for inference.
    pub fn restore_params_only(&self, params: &mut ParamSet) -> Result<(), CheckpointError> {
        for entry in params.iter() {
            let src = self
                .blobs
                .iter()
                .find(|(n, _)| n == &entry.name)
                .ok_or_else(|| CheckpointError::ParamMismatch(format!("missing blob {}", entry.name)))?;
            if src.1.len() != entry.values.len() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "{} has {} values, model expects {}",
                    entry.name,
                    src.1.len(),
                    entry.values.len()
                )));
            }
        }
        for entry in params.iter_mut() {
            let src = self.blobs.iter().find(|(n, _)| n == &entry.name).expect("checked above");
            entry.values.copy_from_slice(&src.1);
        }
        Ok(())
    }

    /// Write parameters and moments back into a freshly built model and
    /// optimizer. Every parameter entry must be present with the right length.
    pub fn restore_into(&self, params: &mut ParamSet, opt: &mut Adam) -> Result<(), CheckpointError> {
        let find = |name: &str| -> Result<&Vec<f64>, CheckpointError> {
            self.blobs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| CheckpointError::ParamMismatch(format!("missing blob {name}")))
        };
        let n = params.iter().count();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for entry in params.iter() {
            for (src, dst_name) in [
                (find(&entry.name)?, "values"),
                (find(&format!("adam.m.{}", entry.name))?, "adam.m"),
                (find(&format!("adam.v.{}", entry.name))?, "adam.v"),
            ] {
                if src.len() != entry.values.len() {
                    return Err(CheckpointError::ParamMismatch(format!(
                        "{} {} has {} values, model expects {}",
                        entry.name,
                        dst_name,
                        src.len(),
                        entry.values.len()
                    )));
                }
            }
            m.push(find(&format!("adam.m.{}", entry.name))?.clone());
            v.push(find(&format!("adam.v.{}", entry.name))?.clone());
        }
        for entry in params.iter_mut() {
            let src = self.blobs.iter().find(|(n, _)| n == &entry.name).expect("checked above");
            entry.values.copy_from_slice(&src.1);
        }
        opt.restore(self.state.step, m, v);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash.to_le_bytes());
        buf.extend_from_slice(&self.state.step.to_le_bytes());
        buf.extend_from_slice(&self.state.epochs_done.to_le_bytes());
        buf.extend_from_slice(&self.state.gamma.to_bits().to_le_bytes());
        buf.extend_from_slice(&self.state.best_metric.to_bits().to_le_bytes());
        buf.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for (name, values) in &self.blobs {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// A config-hash mismatch is worth a warning but not a refusal: resuming
    /// under, say, a different output directory is legitimate. Callers decide.
    pub fn warn_if_config_differs(&self, expected: u64) -> bool {
        if self.config_hash != expected {
            log::warn!(
                "checkpoint config hash {:#018x} differs from current config {:#018x}",
                self.config_hash,
                expected
            );
            return true;
        }
        false
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut file = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        if take(&buf, &mut pos, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32_at(&buf, &mut pos)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let found = u64_at(&buf, &mut pos)?;
        let step = u64_at(&buf, &mut pos)?;
        let epochs_done = u64_at(&buf, &mut pos)?;
        let gamma = f64::from_bits(u64_at(&buf, &mut pos)?);
        let best_metric = f64::from_bits(u64_at(&buf, &mut pos)?);
        let n_blobs = u64_at(&buf, &mut pos)? as usize;
        let mut blobs = Vec::with_capacity(n_blobs.min(1 << 20));
        for _ in 0..n_blobs {
            let name_len = u64_at(&buf, &mut pos)? as usize;
            let name = String::from_utf8(take(&buf, &mut pos, name_len)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(format!("blob name not utf-8: {e}")))?;
            let count = u64_at(&buf, &mut pos)? as usize;
            if pos.saturating_add(count.saturating_mul(8)) > buf.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "blob {name} claims {count} values past end of file"
                )));
            }
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(f64::from_bits(u64_at(&buf, &mut pos)?));
            }
            blobs.push((name, values));
        }
        if pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes after final blob",
                buf.len() - pos
            )));
        }
        Ok(Checkpoint {
            config_hash: found,
            state: RunState { step, epochs_done, gamma, best_metric },
            blobs,
        })
    }
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    if pos.saturating_add(n) > buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "needed {n} bytes at offset {pos}, file has {}",
            buf.len()
        )));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u32_at(buf: &[u8], pos: &mut usize) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
}

fn u64_at(buf: &[u8], pos: &mut usize) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(take(buf, pos, 8)?.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = ParamSet::new();
        set.add("layer.w", &[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        set.add("layer.b", &[2], vec![0.25, -0.75]);
        set
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut params = sample_params();
        let mut opt = Adam::new(0.01, &params);
        // a couple of updates so moments are non-trivial
        for _ in 0..3 {
            let grads: Vec<Option<Vec<f64>>> = params
                .iter()
                .map(|e| Some(e.values.iter().map(|v| v.cos()).collect()))
                .collect();
            opt.update(&mut params, &grads);
        }
        let hash = config_hash("model=test seed=1");
        let state = RunState { step: opt.step, epochs_done: 2, gamma: 9.4, best_metric: 0.87 };
        let ck = Checkpoint::capture(hash, state.clone(), &params, &opt);
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_hash, hash);
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.blobs.len(), ck.blobs.len());
        for ((n1, v1), (n2, v2)) in ck.blobs.iter().zip(&loaded.blobs) {
            assert_eq!(n1, n2);
            assert_eq!(v1.len(), v2.len());
            for (a, b) in v1.iter().zip(v2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // restoring into a fresh model/optimizer reproduces values and moments
        let mut fresh = sample_params();
        for e in fresh.iter_mut() {
            for v in e.values.iter_mut() {
                *v = 0.0;
            }
        }
        let mut fresh_opt = Adam::new(0.01, &fresh);
        loaded.restore_into(&mut fresh, &mut fresh_opt).unwrap();
        for (a, b) in params.iter().zip(fresh.iter()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let (m1, v1) = opt.moments();
        let (m2, v2) = fresh_opt.moments();
        assert_eq!(fresh_opt.step, opt.step);
        for (a, b) in m1.iter().zip(m2).chain(v1.iter().zip(v2)) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn config_mismatch_is_flagged_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let params = sample_params();
        let opt = Adam::new(0.01, &params);
        let state = RunState { step: 0, epochs_done: 0, gamma: 10.0, best_metric: f64::NEG_INFINITY };
        Checkpoint::capture(config_hash("a"), state, &params, &opt).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.warn_if_config_differs(config_hash("b")));
        assert!(!loaded.warn_if_config_differs(config_hash("a")));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"NOPExxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path).unwrap_err(), CheckpointError::BadMagic));

        let params = sample_params();
        let opt = Adam::new(0.01, &params);
        let state = RunState { step: 0, epochs_done: 0, gamma: 10.0, best_metric: 0.0 };
        let ck = Checkpoint::capture(config_hash("a"), state, &params, &opt);
        ck.save(&path).unwrap();

        // truncated mid-blob: the error names the parameter it broke inside
        let bytes = std::fs::read(&path).unwrap();
        let mut cut = bytes.clone();
        cut.truncate(bytes.len() - 5);
        std::fs::write(&path, &cut).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        match err {
            CheckpointError::Corrupt(msg) => assert!(msg.contains("adam.v.layer.b"), "{msg}"),
            other => panic!("expected Corrupt, got {other:?}"),
        }

        // future version number is refused by name
        let mut versioned = bytes.clone();
        versioned[4..8].copy_from_slice(&9999u32.to_le_bytes());
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(Checkpoint::load(&path).unwrap_err(), CheckpointError::BadVersion(9999)));
    }

    #[test]
    fn restore_rejects_shape_drift() {
        let params = sample_params();
        let opt = Adam::new(0.01, &params);
        let state = RunState { step: 0, epochs_done: 0, gamma: 10.0, best_metric: 0.0 };
        let ck = Checkpoint::capture(config_hash("a"), state, &params, &opt);
        let mut other = ParamSet::new();
        other.add("layer.w", &[4, 2], vec![0.0; 8]);
        other.add("layer.b", &[2], vec![0.0; 2]);
        let mut other_opt = Adam::new(0.01, &other);
        assert!(matches!(
            ck.restore_into(&mut other, &mut other_opt).unwrap_err(),
            CheckpointError::ParamMismatch(_)
        ));
    }
}
