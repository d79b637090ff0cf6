//! Binary checkpoint format.
//!
//! ```text
//! "DGRD" | version u16 LE | header length u32 LE | header JSON {arch, meta}
//! per tensor, in declaration order: element count u64 LE | f32 LE values
//! CRC32 (u32 LE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, LayerParams, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DGRD";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub updates: usize,
    pub val_accuracy: Option<f64>,
    pub seed: u64,
    /// Preprocessing the model was trained with, opaque to this module.
    #[serde(default)]
    pub preprocessing: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            arch: self.model.spec().clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.all_tensors() {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::CorruptCheckpoint("file shorter than its preamble".into()));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if bytes.len() < 14 {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptCheckpoint(
                "CRC mismatch (truncated or damaged file)".into(),
            ));
        }

        let mut r = Reader { buf: body, pos: 6 };
        let header_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let mut model = Model::zeroed(header.arch)
            .map_err(|e| Error::CorruptCheckpoint(format!("stored architecture is invalid: {e}")))?;
        for t in tensors_mut(&mut model) {
            let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if count != t.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor of {} elements stored with count {count}",
                    t.len()
                )));
            }
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?,
            )?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            model,
            meta: header.meta,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint("unexpected end of data".into())),
        }
    }
}

fn tensors_mut(model: &mut Model) -> Vec<&mut Tensor> {
    model
        .params_mut()
        .iter_mut()
        .flat_map(|p| match p {
            LayerParams::None => vec![],
            LayerParams::Affine { weight, bias } => vec![weight, bias],
            LayerParams::Norm(s) => vec![&mut s.gamma, &mut s.beta, &mut s.running_mean, &mut s.running_var],
        })
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
