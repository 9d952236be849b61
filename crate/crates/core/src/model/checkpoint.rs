//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes   "SRPOCKPT"
//! version    u32 LE
//! meta_len   u32 LE, then meta_len bytes of JSON (world, model, settings)
//! n_arrays   u32 LE
//! per array: name_len u16 LE, name (UTF-8), count u64 LE, count x f64 LE
//! checksum   32 bytes, SHA-256 of every preceding byte
//! ```
//! Arrays appear in the fixed order `question_emb, step_emb, pool,
//! hidden_bias, out_w, out_b`. Loading never migrates other versions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Params, PolicyModel, Result, ARRAY_NAMES};
use crate::world::WorldConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SRPOCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub world: WorldConfig,
    pub model: ModelConfig,
    /// Free-form settings recorded by the writer (optimizer, run config).
    #[serde(default)]
    pub settings: serde_json::Value,
}

pub(crate) fn encode(model: &PolicyModel, settings: &serde_json::Value, version: u32) -> Vec<u8> {
    let meta = CheckpointMeta {
        world: model.world().clone(),
        model: model.config().clone(),
        settings: settings.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ARRAY_NAMES.len() as u32).to_le_bytes());
    for (name, arr) in ARRAY_NAMES.iter().zip(model.params().arrays()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(model: &PolicyModel, settings: &serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, encode(model, settings, CHECKPOINT_VERSION))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(PolicyModel, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(ModelError::Corrupt("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::Corrupt(format!("metadata: {e}")))?;
    let n = r.u32()? as usize;
    if n != ARRAY_NAMES.len() {
        return Err(ModelError::Corrupt(format!("expected {} arrays, found {n}", ARRAY_NAMES.len())));
    }
    let mut arrays: Vec<Vec<f64>> = Vec::with_capacity(n);
    for expected in ARRAY_NAMES {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| ModelError::Corrupt("array name".into()))?;
        if name != expected {
            return Err(ModelError::Corrupt(format!("expected array {expected}, found {name}")));
        }
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| ModelError::Corrupt("array size".into()))?)?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("six arrays");
    let params = Params {
        question_emb: next(),
        step_emb: next(),
        pool: next(),
        hidden_bias: next(),
        out_w: next(),
        out_b: next(),
    };
    let model = PolicyModel::from_parts(meta.world.clone(), meta.model.clone(), params)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyModel, CheckpointMeta)> {
    decode(&fs::read(path)?)
}
