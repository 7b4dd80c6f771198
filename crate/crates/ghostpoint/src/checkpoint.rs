//! Versioned binary checkpoints: the resolved config, every parameter with
//! its optimizer moments, the optimizer step counter, and the master seed,
//! all little-endian with a trailing integrity checksum. A checkpoint plus
//! its config is sufficient to resume training or evaluate bit-identically
//! on any platform.

use crate::config::{parse_config, ConfigError, RunConfig};
use crate::model::{model_param_names, ModelConfig};
use crate::optim::{OptimError, ParamStore};
use crate::scalar::Scalar;
use crate::util::{
    fnv1a64, read_f64_vec, read_str, read_u32, read_u64, write_f64_slice, write_str, write_u32,
    write_u64,
};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CKPT_MAGIC: [u8; 8] = *b"GHOSTCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (supported: {CKPT_VERSION})")]
    BadVersion(u32),
    #[error("checkpoint corrupted: stored checksum {stored:#018x} != computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error(
        "checkpoint parameters do not match the model config: {detail} \
         (was the architecture changed after training?)"
    )]
    ParamMismatch { detail: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Everything a checkpoint stores.
pub struct Checkpoint<F: Scalar> {
    pub config: RunConfig,
    pub store: ParamStore<F>,
    pub master_seed: u64,
}

fn to_f64s<F: Scalar>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

fn from_f64s<F: Scalar>(v: Vec<f64>) -> Vec<F> {
    v.into_iter().map(F::from_f64).collect()
}

/// Serialize to any writer. The trailing u64 is the FNV-1a hash of every
/// preceding byte.
pub fn write_checkpoint<F: Scalar, W: Write>(
    w: &mut W,
    ckpt: &Checkpoint<F>,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    let io = |e: std::io::Error| CheckpointError::Io { path: "<writer>".into(), source: e };
    write_u32(&mut buf, CKPT_VERSION).map_err(io)?;
    write_str(&mut buf, &ckpt.config.to_toml()?).map_err(io)?;
    write_u64(&mut buf, ckpt.store.step).map_err(io)?;
    write_u64(&mut buf, ckpt.master_seed).map_err(io)?;
    write_u32(&mut buf, ckpt.store.len() as u32).map_err(io)?;
    for e in ckpt.store.iter() {
        write_str(&mut buf, &e.name).map_err(io)?;
        write_u32(&mut buf, e.shape.len() as u32).map_err(io)?;
        for &d in &e.shape {
            write_u64(&mut buf, d as u64).map_err(io)?;
        }
        write_u64(&mut buf, e.value.len() as u64).map_err(io)?;
        write_f64_slice(&mut buf, &to_f64s(&e.value)).map_err(io)?;
        write_f64_slice(&mut buf, &to_f64s(&e.m)).map_err(io)?;
        write_f64_slice(&mut buf, &to_f64s(&e.v)).map_err(io)?;
    }
    let checksum = fnv1a64(&buf);
    write_u64(&mut buf, checksum).map_err(io)?;
    w.write_all(&buf).map_err(io)
}

/// Deserialize and integrity-check. The embedded config is re-validated by
/// the strict schema, so a checkpoint from an incompatible version of the
/// config format is rejected with a named key.
pub fn read_checkpoint<F: Scalar, R: Read>(r: &mut R) -> Result<Checkpoint<F>, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| CheckpointError::Io { path: "<reader>".into(), source: e })?;
    if buf.len() < 8 + 4 + 8 || buf[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body = &buf[..buf.len() - 8];
    let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = &body[8..];
    let trunc = |what: &str| CheckpointError::Truncated(what.to_string());
    let version = read_u32(&mut r).map_err(|_| trunc("version"))?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_text = read_str(&mut r).map_err(|_| trunc("config"))?;
    let config = parse_config(&config_text, &[])?;
    let step = read_u64(&mut r).map_err(|_| trunc("step"))?;
    let master_seed = read_u64(&mut r).map_err(|_| trunc("master seed"))?;
    let n = read_u32(&mut r).map_err(|_| trunc("parameter count"))? as usize;
    let mut store = ParamStore::new();
    for i in 0..n {
        let name = read_str(&mut r).map_err(|_| trunc(&format!("parameter {i} name")))?;
        let ndim = read_u32(&mut r).map_err(|_| trunc(&name))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r).map_err(|_| trunc(&name))? as usize);
        }
        let len = read_u64(&mut r).map_err(|_| trunc(&name))? as usize;
        let value = read_f64_vec(&mut r, len).map_err(|_| trunc(&name))?;
        let m = read_f64_vec(&mut r, len).map_err(|_| trunc(&name))?;
        let v = read_f64_vec(&mut r, len).map_err(|_| trunc(&name))?;
        store.add_with_state(&name, &shape, from_f64s(value), from_f64s(m), from_f64s(v))?;
    }
    store.step = step;
    Ok(Checkpoint { config, store, master_seed })
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    ckpt: &Checkpoint<F>,
) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    write_checkpoint(&mut f, ckpt)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    read_checkpoint(&mut f)
}

/// Reject a checkpoint whose parameters cannot host `cfg`: every expected
/// name must exist with the expected tensor layout. Catches e.g. evaluating
/// a checkpoint with a different embedding dimension.
pub fn verify_params_match<F: Scalar>(
    cfg: &ModelConfig,
    store: &ParamStore<F>,
) -> Result<(), CheckpointError> {
    let want = model_param_names(cfg);
    let got: Vec<&str> = store.iter().map(|e| e.name.as_str()).collect();
    if want.len() != got.len() {
        return Err(CheckpointError::ParamMismatch {
            detail: format!("expected {} parameters, checkpoint has {}", want.len(), got.len()),
        });
    }
    for (w, g) in want.iter().zip(&got) {
        if w != g {
            return Err(CheckpointError::ParamMismatch {
                detail: format!("expected parameter {w:?}, checkpoint has {g:?}"),
            });
        }
    }
    // Shape spot-checks that pin the dimension-bearing tensors.
    let d = cfg.d;
    for (name, shape) in [
        ("embed.vocab", vec![cfg.vocab, d]),
        ("embed.ghost", vec![1, d]),
        ("head.w1", vec![d, crate::policy::HEAD_HIDDEN]),
    ] {
        let e = store.get(name)?;
        if e.shape != shape {
            return Err(CheckpointError::ParamMismatch {
                detail: format!("{name} has shape {:?}, config wants {shape:?}", e.shape),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::register_model_params;
    use crate::util::rng_stream;

    fn small_store(cfg: &ModelConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(7, "init", 0);
        register_model_params(&mut store, cfg, &mut rng).unwrap();
        store
    }

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d = 12;
        cfg.model.widths = [4, 6, 8];
        cfg.model.ghost_budget = 30;
        cfg
    }

    #[test]
    fn roundtrip_preserves_everything_bit_exactly() {
        let cfg = small_config();
        let mut store = small_store(&cfg.model);
        store.step = 17;
        store.get_mut("head.b2").unwrap().m[0] = 0.125;
        let ckpt = Checkpoint { config: cfg, store, master_seed: 99 };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let back: Checkpoint<f64> = read_checkpoint(&mut &bytes[..]).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.master_seed, 99);
        assert_eq!(back.store.step, 17);
        assert_eq!(back.store.len(), ckpt.store.len());
        for (a, b) in back.store.iter().zip(ckpt.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.value, b.value);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
        // Re-serialization is byte-identical.
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = small_config();
        let ckpt =
            Checkpoint { config: cfg.clone(), store: small_store(&cfg.model), master_seed: 0 };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            read_checkpoint::<f64, _>(&mut &bytes[..]),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        assert!(matches!(
            read_checkpoint::<f64, _>(&mut &b"NOTACKPT________"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let cfg = small_config();
        let ckpt =
            Checkpoint { config: cfg.clone(), store: small_store(&cfg.model), master_seed: 0 };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        // Bump the version field and re-stamp the checksum.
        bytes[8] = 2;
        let n = bytes.len();
        let sum = fnv1a64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            read_checkpoint::<f64, _>(&mut &bytes[..]),
            Err(CheckpointError::BadVersion(2))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected_with_detail() {
        let cfg = small_config();
        let store = small_store(&cfg.model);
        verify_params_match(&cfg.model, &store).unwrap();
        let other = ModelConfig { d: 24, widths: [4, 6, 8], ..cfg.model.clone() };
        let err = verify_params_match(&other, &store).unwrap_err();
        assert!(matches!(err, CheckpointError::ParamMismatch { .. }), "{err}");
        let untied = ModelConfig { tied_stages: false, ..cfg.model.clone() };
        assert!(verify_params_match(&untied, &store).is_err());
    }

    #[test]
    fn file_roundtrip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("model.ckpt");
        let cfg = small_config();
        let ckpt =
            Checkpoint { config: cfg.clone(), store: small_store(&cfg.model), master_seed: 5 };
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.master_seed, 5);
    }
}
