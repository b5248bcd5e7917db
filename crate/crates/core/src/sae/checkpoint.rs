// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAEC checkpoints.
//!
//! Layout: magic `SAEC`, u32 version, u32 header length, UTF-8 JSON header,
//! then `enc_weight`, `enc_bias`, `dec_weight`, `dec_bias`, `input_mean` as
//! little-endian f32. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SaeConfig, SaeModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: SaeConfig,
    input_dim: usize,
    latent_dim: usize,
    seed: u64,
}

pub fn save_model<W: Write>(model: &SaeModel<f32>, mut sink: W) -> Result<()> {
    model.validate()?;
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        input_dim: model.input_dim(),
        latent_dim: model.latent_dim(),
        seed: model.config.seed,
    })?;
    let mut buf = Vec::with_capacity(12 + header.len() + 4 * blob_len(&model.config));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for blob in [
        &model.enc_weight,
        &model.enc_bias,
        &model.dec_weight,
        &model.dec_bias,
        &model.input_mean,
    ] {
        for v in blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

fn blob_len(c: &SaeConfig) -> usize {
    let (m, l) = (c.input_dim, c.latent_dim);
    2 * l * m + l + 2 * m
}

pub fn load_model<R: Read>(mut source: R) -> Result<SaeModel<f32>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<SaeModel<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint truncated before header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("checkpoint truncated inside header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let c = &header.config;
    if header.input_dim != c.input_dim || header.latent_dim != c.latent_dim || header.seed != c.seed {
        return Err(Error::Format("checkpoint header disagrees with its config".into()));
    }
    c.validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let (m, l) = (c.input_dim, c.latent_dim);
    let expected = blob_len(c)
        .checked_mul(4)
        .ok_or_else(|| Error::Format("checkpoint shape overflows".into()))?;
    let blobs = &body[hlen..];
    if blobs.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint parameter block is {} bytes, expected {expected}",
            blobs.len()
        )));
    }
    let mut floats = blobs.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
    let model = SaeModel {
        config: c.clone(),
        enc_weight: take(l * m),
        enc_bias: take(l),
        dec_weight: take(m * l),
        dec_bias: take(m),
        input_mean: take(m),
    };
    model
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
    Ok(model)
}

pub fn save_model_file(model: &SaeModel<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    save_model(model, &mut buf)?;
    crate::fsutil::write_atomic(path, &buf)
}

pub fn load_model_file(path: &Path) -> Result<SaeModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
