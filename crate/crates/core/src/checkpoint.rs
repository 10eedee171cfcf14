//! Checkpoint container: magic, version, a JSON header describing the
//! config and tensor layout, then a raw little-endian f32 payload followed by
//! packed mask bitsets.
//!
//! Layout:
//!
//! ```text
//! "SLAK" | u16 version | u32 header_len | header JSON | payload
//! ```
//!
//! Header offsets are byte positions inside the payload. Tensors appear in
//! model visit order, masks afterwards sorted by id, so saving a freshly
//! loaded checkpoint reproduces the input byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlakError};
use crate::model::{Model, ModelConfig, ParamKind};
use crate::sparsity::Mask;

const MAGIC: &[u8; 4] = b"SLAK";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    id: String,
    kind: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    id: String,
    shape: Vec<usize>,
    nnz: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
    masks: Vec<MaskRecord>,
}

fn kind_tag(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::RunningStat => "running_stat",
    }
}

/// Serializes model state and masks into the container format.
pub fn to_bytes(model: &Model, masks: &BTreeMap<String, Mask>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit(&mut |id, kind, t| {
        tensors.push(TensorRecord {
            id: id.to_string(),
            kind: kind_tag(kind).to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut mask_records = Vec::new();
    for (id, mask) in masks {
        mask_records.push(MaskRecord {
            id: id.clone(),
            shape: mask.shape().to_vec(),
            nnz: mask.nnz(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&mask.pack());
    }
    let header = Header {
        config: model.config().clone(),
        tensors,
        masks: mask_records,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(10 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

pub fn save(path: &Path, model: &Model, masks: &BTreeMap<String, Mask>) -> Result<()> {
    fs::write(path, to_bytes(model, masks))?;
    Ok(())
}

fn format_err(offset: usize, reason: impl Into<String>) -> SlakError {
    SlakError::Format { offset: offset as u64, reason: reason.into() }
}

/// Rebuilds a model and its masks from container bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, Mask>)> {
    if bytes.len() < 10 {
        return Err(format_err(bytes.len(), "file shorter than the fixed preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(0, "bad magic, not a checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported container version {version}")));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let payload_start = 10 + header_len;
    if bytes.len() < payload_start {
        return Err(format_err(10, "header extends past end of file"));
    }
    let header: Header = serde_json::from_slice(&bytes[10..payload_start])
        .map_err(|e| format_err(10, format!("header is not valid JSON: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut model = Model::build(&header.config, 0)?;
    let mut by_id: BTreeMap<&str, &TensorRecord> =
        header.tensors.iter().map(|t| (t.id.as_str(), t)).collect();
    if by_id.len() != header.tensors.len() {
        return Err(SlakError::ConfigMismatch("duplicate tensor id in header".into()));
    }

    let mut problem: Option<SlakError> = None;
    let mut consumed_bytes = 0usize;
    model.visit_params_mut(&mut |id, kind, t| {
        if problem.is_some() {
            return;
        }
        let Some(rec) = by_id.remove(id) else {
            problem = Some(SlakError::ConfigMismatch(format!(
                "checkpoint is missing tensor {id}"
            )));
            return;
        };
        if rec.shape != t.shape() {
            problem = Some(SlakError::ConfigMismatch(format!(
                "{id}: checkpoint shape {:?} vs model shape {:?}",
                rec.shape,
                t.shape()
            )));
            return;
        }
        if rec.kind != kind_tag(kind) {
            problem = Some(SlakError::ConfigMismatch(format!(
                "{id}: checkpoint kind {} vs model kind {}",
                rec.kind,
                kind_tag(kind)
            )));
            return;
        }
        let start = rec.offset as usize;
        let nbytes = t.len() * 4;
        let Some(src) = payload.get(start..start + nbytes) else {
            problem = Some(format_err(
                payload_start + start,
                format!("{id}: payload slice out of bounds"),
            ));
            return;
        };
        for (dst, chunk) in t.data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        consumed_bytes += nbytes;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(SlakError::ConfigMismatch(format!(
            "checkpoint names {extra}, which this architecture does not have"
        )));
    }

    let mut masks = BTreeMap::new();
    for rec in &header.masks {
        let n: usize = rec.shape.iter().product();
        let nbytes = n.div_ceil(8);
        let start = rec.offset as usize;
        let Some(src) = payload.get(start..start + nbytes) else {
            return Err(format_err(
                payload_start + start,
                format!("mask {}: payload slice out of bounds", rec.id),
            ));
        };
        let mask = Mask::unpack(&rec.shape, src)?;
        if mask.nnz() != rec.nnz {
            return Err(SlakError::ConfigMismatch(format!(
                "mask {}: header says {} active, bitset holds {}",
                rec.id,
                rec.nnz,
                mask.nnz()
            )));
        }
        masks.insert(rec.id.clone(), mask);
        consumed_bytes += nbytes;
    }
    if consumed_bytes != payload.len() {
        return Err(format_err(
            payload_start + consumed_bytes,
            format!(
                "payload holds {} bytes, records account for {consumed_bytes}",
                payload.len()
            ),
        ));
    }
    Ok((model, masks))
}

pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, Mask>)> {
    from_bytes(&fs::read(path)?)
}
