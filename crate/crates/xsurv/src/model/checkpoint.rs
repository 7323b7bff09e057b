//! Checkpoint files: a TOML header (format tag, model config, training
//! metadata, and a name -> shape/offset table) followed by a marker line and
//! the raw little-endian 32-bit float parameter blocks.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, XSurv};
use crate::blocks::ParamEntry;
use crate::tensor::Element;

const MARKER: &[u8] = b"\n@@DATA@@\n";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Interval edges of the survival scheme the model was trained with.
    pub interval_edges: Vec<f64>,
    pub iteration: u64,
    pub val_cindex: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this block inside the data section.
    offset: u64,
}

pub struct LoadedCheckpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    params: Vec<(ParamRecord, Vec<f32>)>,
}

impl LoadedCheckpoint {
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(r, _)| r.name.as_str())
    }
}

pub fn save_checkpoint<E: Element>(
    path: &Path,
    config: &ModelConfig,
    params: &[ParamEntry<E>],
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut records = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in params {
        records.push(ParamRecord {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += (p.tensor.numel() * 4) as u64;
    }
    let header = Header {
        format: "xsurv-checkpoint".into(),
        version: 1,
        config: config.clone(),
        meta: meta.clone(),
        params: records,
    };
    let header_text = toml::to_string(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header encode: {}", e)))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| ModelError::Checkpoint(format!("create {}: {}", path.display(), e)))?;
    file.write_all(header_text.as_bytes())
        .and_then(|_| file.write_all(MARKER))
        .map_err(|e| ModelError::Checkpoint(format!("write: {}", e)))?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in params {
        for v in p.tensor.data().iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    file.write_all(&buf)
        .map_err(|e| ModelError::Checkpoint(format!("write payload: {}", e)))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Checkpoint(format!("read {}: {}", path.display(), e)))?;
    let marker_at = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| ModelError::Checkpoint("missing data marker".into()))?;
    let header_text = std::str::from_utf8(&bytes[..marker_at])
        .map_err(|e| ModelError::Checkpoint(format!("header not utf-8: {}", e)))?;
    let header: Header = toml::from_str(header_text)
        .map_err(|e| ModelError::Checkpoint(format!("header parse: {}", e)))?;
    if header.format != "xsurv-checkpoint" {
        return Err(ModelError::Checkpoint(format!(
            "unexpected format tag {:?}",
            header.format
        )));
    }
    let payload = &bytes[marker_at + MARKER.len()..];
    let mut params = Vec::with_capacity(header.params.len());
    for rec in header.params {
        let n: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(ModelError::Checkpoint(format!(
                "block {} ({} floats at offset {}) exceeds payload of {} bytes",
                rec.name,
                n,
                rec.offset,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((rec, data));
    }
    Ok(LoadedCheckpoint {
        config: header.config,
        meta: header.meta,
        params,
    })
}

impl<E: Element> XSurv<E> {
    /// Overwrite this model's parameters from a checkpoint, validating every
    /// name and shape. On mismatch the error lists the differing entries.
    pub fn load_params(&self, ckpt: &LoadedCheckpoint) -> Result<(), ModelError> {
        let params = self.params();
        let mut diffs = Vec::new();
        if params.len() != ckpt.params.len() {
            diffs.push(format!(
                "parameter count: model has {}, checkpoint has {}",
                params.len(),
                ckpt.params.len()
            ));
        }
        for (p, (rec, _)) in params.iter().zip(&ckpt.params) {
            if p.name != rec.name {
                diffs.push(format!("name: model {:?} vs checkpoint {:?}", p.name, rec.name));
            } else if p.tensor.shape() != rec.shape.as_slice() {
                diffs.push(format!(
                    "{}: model shape {:?} vs checkpoint shape {:?}",
                    p.name,
                    p.tensor.shape(),
                    rec.shape
                ));
            }
        }
        if !diffs.is_empty() {
            diffs.truncate(20);
            return Err(ModelError::Checkpoint(format!(
                "config/checkpoint mismatch:\n  {}",
                diffs.join("\n  ")
            )));
        }
        for (p, (_, data)) in params.iter().zip(&ckpt.params) {
            let mut dst = p.tensor.data_mut();
            for (d, &v) in dst.iter_mut().zip(data) {
                *d = E::of_f32(v);
            }
        }
        Ok(())
    }
}
