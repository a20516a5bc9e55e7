//! Binary checkpoint format.
//!
//! Layout: magic `VRWK`, format version (u32 LE), length-prefixed UTF-8
//! JSON config blob, then every learnable tensor in declaration order as
//! `name_len (u32 LE) | name | rank (u32 LE) | dims (u32 LE each) | f32 LE
//! payload`. Tensors are stored in single precision regardless of the
//! compute type.
//!
//! The reader treats its input as untrusted: every length is validated
//! against the remaining input before any allocation, and decoding never
//! panics on malformed bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::model::{tensor_specs, ModelConfig, ModelParams};
use crate::tensor::cast_slice;

pub const MAGIC: &[u8; 4] = b"VRWK";
pub const FORMAT_VERSION: u32 = 1;

/// Caps applied to the decoded config before trusting its sizes.
const MAX_DEPTH: usize = 4096;
const MAX_DIM: usize = 65_536;
const MAX_CLASSES: usize = 1_000_000;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("config blob is not valid JSON: {0}")]
    BadConfig(String),
    #[error("config rejected: {0}")]
    ConfigOutOfRange(String),
    #[error("tensor name mismatch: expected `{expected}`, found `{found}`")]
    NameMismatch { expected: String, found: String },
    #[error("tensor `{name}` has unexpected shape")]
    ShapeMismatch { name: String },
    #[error("trailing bytes after the last tensor")]
    TrailingBytes,
}

/// Serialize config and parameters to the wire format.
pub fn checkpoint_bytes(config: &ModelConfig, params: &ModelParams<f64>) -> Vec<u8> {
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    let specs = tensor_specs(config);
    for (spec, data) in specs.iter().zip(params.slices()) {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.dims.len() as u32).to_le_bytes());
        for &d in &spec.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in data.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Atomic write: serialize to `<path>.tmp` then rename over the target.
pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams<f64>,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(config, params);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn check_config_limits(config: &ModelConfig) -> Result<(), CheckpointError> {
    let reject = |msg: String| Err(CheckpointError::ConfigOutOfRange(msg));
    if config.depth > MAX_DEPTH {
        return reject(format!("depth {} over limit", config.depth));
    }
    if config.embed_dim > MAX_DIM || config.hidden_dim > MAX_DIM {
        return reject("embedding or hidden dim over limit".into());
    }
    if config.image_size > MAX_DIM || config.patch_size > MAX_DIM {
        return reject("image or patch size over limit".into());
    }
    if config.image_channels > 64 {
        return reject("image_channels over limit".into());
    }
    if config.num_classes > MAX_CLASSES {
        return reject("num_classes over limit".into());
    }
    config
        .validate()
        .map_err(|e| CheckpointError::ConfigOutOfRange(e.to_string()))
}

/// Decode a checkpoint from raw bytes (single-precision parameters widened
/// to `f64`).
pub fn read_checkpoint_bytes(
    bytes: &[u8],
) -> Result<(ModelConfig, ModelParams<f64>), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_len = cur.u32("config length")? as usize;
    let config_bytes = cur.take(config_len, "config blob")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    check_config_limits(&config)?;

    // Total payload must fit in what's left before anything is allocated.
    let specs = tensor_specs(&config);
    let mut expected: u128 = 0;
    for spec in &specs {
        expected += (4 + spec.name.len() + 4 + 4 * spec.dims.len()) as u128;
        expected += 4 * spec.len() as u128;
    }
    if (cur.remaining() as u128) < expected {
        return Err(CheckpointError::Truncated("tensor payload"));
    }

    let mut params = ModelParams::<f64>::zeros(&config);
    for (spec, dst) in specs.iter().zip(params.slices_mut()) {
        let name_len = cur.u32("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::Truncated("name length"));
        }
        let name_bytes = cur.take(name_len as usize, "name")?;
        let found = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Truncated("utf-8 name"))?;
        if found != spec.name {
            return Err(CheckpointError::NameMismatch {
                expected: spec.name.clone(),
                found: found.to_owned(),
            });
        }
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK || rank as usize != spec.dims.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: spec.name.clone(),
            });
        }
        for &expected_dim in &spec.dims {
            let dim = cur.u32("dim")? as usize;
            if dim != expected_dim {
                return Err(CheckpointError::ShapeMismatch {
                    name: spec.name.clone(),
                });
            }
        }
        let payload = cur.take(4 * spec.len(), "tensor data")?;
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    if cur.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f64>), CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint_bytes(&bytes)
}

/// Round parameters to storage precision, as a load would.
pub fn quantize_to_storage(params: &ModelParams<f64>, config: &ModelConfig) -> ModelParams<f64> {
    let mut out = ModelParams::<f64>::zeros(config);
    for (dst, src) in out.slices_mut().into_iter().zip(params.slices()) {
        let narrowed: Vec<f32> = cast_slice(src);
        dst.copy_from_slice(&cast_slice::<f32, f64>(&narrowed));
    }
    out
}
