//! Binary checkpoint format.
//!
//! ```text
//! "MCEC" | u32 version | u64 config fingerprint | u32 record count
//! record: u32 name length | name (UTF-8) | u8 dtype | u32 rank | u64 extents[rank] | payload
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! All integers and payloads are little-endian. Dtype tags: 0 = f32,
//! 1 = f64, 2 = u64, 3 = u8. The run seed and the config text travel as the
//! records `meta.seed` (u64) and `meta.config` (u8).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mce_tensor::{Real, Tensor, REAL_DTYPE_TAG};

use crate::config::RunConfig;
use crate::error::{MceError, Result};
use crate::model::MceModel;

pub const MAGIC: &[u8; 4] = b"MCEC";
pub const VERSION: u32 = 1;
const SEED_RECORD: &str = "meta.seed";
const CONFIG_RECORD: &str = "meta.config";
const TAG_U64: u8 = 2;
const TAG_U8: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub seed: u64,
    /// Config the parameters were trained under, as TOML.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &MceModel, cfg: &RunConfig, seed: u64) -> Self {
        Checkpoint {
            fingerprint: cfg.fingerprint(),
            seed,
            config: cfg.to_toml_string(),
            tensors: model
                .params
                .iter()
                .map(|(n, p)| (n.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config)
    }

    /// Rebuilds the model described by the stored config and loads the weights.
    pub fn into_model(self) -> Result<(RunConfig, MceModel)> {
        let cfg = self.run_config()?;
        if cfg.fingerprint() != self.fingerprint {
            return Err(MceError::CheckpointMismatch(
                "stored config does not match its fingerprint".into(),
            ));
        }
        let mut model = MceModel::new(&cfg.model, self.seed)?;
        self.apply_to(&mut model)?;
        Ok((cfg, model))
    }

    /// Overwrites `model`'s parameters; names and shapes must match exactly.
    pub fn apply_to(&self, model: &mut MceModel) -> Result<()> {
        if model.params.len() != self.tensors.len() {
            return Err(MceError::CheckpointMismatch(format!(
                "model has {} parameters, checkpoint {}",
                model.params.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            let p = model
                .params
                .get_mut(name)
                .ok_or_else(|| MceError::CheckpointMismatch(format!("unknown parameter {name}")))?;
            if p.value.shape() != t.shape() {
                return Err(MceError::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32 + 2).to_le_bytes());
        put_header(&mut out, SEED_RECORD, TAG_U64, &[1]);
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = self.config.as_bytes();
        put_header(&mut out, CONFIG_RECORD, TAG_U8, &[cfg.len()]);
        out.extend_from_slice(cfg);
        for (name, t) in &self.tensors {
            put_header(&mut out, name, REAL_DTYPE_TAG, t.shape());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a checkpoint. The structure is walked before the checksum is
    /// verified, so a file cut short reports [`MceError::Truncated`] and a
    /// damaged but complete file reports [`MceError::Checksum`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MceError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MceError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint = r.u64()?;
        let count = r.u32()?;
        let mut raw = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            // Each extent needs 8 bytes; reject ranks the file cannot hold.
            if rank > r.remaining() / 8 {
                return Err(MceError::Truncated);
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let width = match tag {
                0 => 4,
                1 | TAG_U64 => 8,
                TAG_U8 => 1,
                _ => 0,
            };
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or(MceError::Truncated)?;
            let len = n.checked_mul(width).ok_or(MceError::Truncated)?;
            let payload = r.take(len)?;
            raw.push((name, tag, shape, payload));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.remaining() != 0 {
            return Err(MceError::Checksum {
                stored,
                computed: crc32fast::hash(&bytes[..bytes.len() - 4]),
            });
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(MceError::Checksum { stored, computed });
        }

        let mut seed = None;
        let mut config = None;
        let mut tensors = BTreeMap::new();
        for (name, tag, shape, payload) in raw {
            let name = std::str::from_utf8(name)
                .map_err(|_| MceError::CheckpointMismatch("record name is not UTF-8".into()))?
                .to_string();
            match (name.as_str(), tag) {
                (SEED_RECORD, TAG_U64) if payload.len() == 8 => {
                    seed = Some(u64::from_le_bytes(payload.try_into().expect("8 bytes")));
                }
                (CONFIG_RECORD, TAG_U8) => {
                    config = Some(String::from_utf8(payload.to_vec()).map_err(|_| {
                        MceError::CheckpointMismatch("config record is not UTF-8".into())
                    })?);
                }
                (_, t) if t == REAL_DTYPE_TAG => {
                    let width = std::mem::size_of::<Real>();
                    let data = payload
                        .chunks_exact(width)
                        .map(|c| Real::from_le_bytes(c.try_into().expect("element width")))
                        .collect();
                    tensors.insert(name, Tensor::new(shape, data)?);
                }
                (_, t) => {
                    return Err(MceError::CheckpointMismatch(format!(
                        "record {name} has dtype tag {t}, this build reads tag {REAL_DTYPE_TAG}"
                    )));
                }
            }
        }
        Ok(Checkpoint {
            fingerprint,
            seed: seed.ok_or_else(|| MceError::CheckpointMismatch("missing seed record".into()))?,
            config: config
                .ok_or_else(|| MceError::CheckpointMismatch("missing config record".into()))?,
            tensors,
        })
    }
}

fn put_header(out: &mut Vec<u8>, name: &str, tag: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(MceError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(&ckpt.encode())?;
            f.sync_all()
        })
        .map_err(|e| MceError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MceError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| MceError::io(path, e))?;
    Checkpoint::decode(&bytes)
}
