//! Checkpoint container: named f64 parameter tensors plus the model config.
//!
//! Layout, little-endian:
//!   magic   4 bytes "VMRC"
//!   version 1 byte  0x01
//!   cfg_len u32, then cfg_len bytes of TOML-encoded ModelConfig
//!   count   u32
//!   per parameter:
//!     name_len u16, name bytes (utf-8)
//!     ndim     u8, ndim x u32 dims
//!     numel x f64 data

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VMRC";
const VERSION: u8 = 1;

pub fn save_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let cfg_toml = toml::to_string(&model.cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;

    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        entries.push((name, t.shape().to_vec(), t.data().to_vec()));
    });

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(cfg_toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_toml.as_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Every stored parameter must match a
/// model parameter by name and shape, with none left over on either side.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };

    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    if take(&mut cur, 1)?[0] != VERSION {
        return Err(Error::format(path, "unsupported checkpoint version"));
    }
    let cfg_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let cfg_str = std::str::from_utf8(take(&mut cur, cfg_len)?)
        .map_err(|_| Error::format(path, "config is not utf-8"))?;
    let cfg: ModelConfig = toml::from_str(cfg_str)
        .map_err(|e| Error::format(path, format!("config parse error: {e}")))?;
    cfg.validate()?;

    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?
            .to_string();
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.insert(name, Tensor::from_vec(shape, data).requires_grad(true));
    }
    if cur != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }

    // Structure comes from the config; weights are then overwritten.
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let mut missing = Vec::new();
    model.visit_params(&mut |name, t| match stored.remove(&name) {
        Some(loaded) => {
            if loaded.shape() != t.shape() {
                missing.push(format!(
                    "{name}: shape {:?} in file vs {:?} in model",
                    loaded.shape(),
                    t.shape()
                ));
            } else {
                *t = loaded;
            }
        }
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    if !stored.is_empty() {
        let extra: Vec<String> = stored.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unknown parameters in checkpoint: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}
