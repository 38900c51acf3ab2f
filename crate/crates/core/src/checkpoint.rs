//! Binary checkpoints.
//!
//! Layout, all integers little-endian u32:
//! magic `DVTF`, version, tensor count, then per tensor the name length,
//! UTF-8 name, rank, extents, and the raw little-endian f32 data.
//!
//! Metadata and optimizer moments travel as ordinary tensors under the
//! reserved prefixes `meta.` and `optim.`, so the container stays a flat list.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"DVTF";
pub const VERSION: u32 = 1;

const META_EPOCH: &str = "meta.epoch";
const META_ACCURACY: &str = "meta.val_accuracy";
const META_HASH: &str = "meta.config_hash";
const META_STEP: &str = "optim.step";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub val_accuracy: f32,
    pub config_hash: u64,
}

/// Raw decoded container: named f32 tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.rank())?.to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&u32_len(e)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::CorruptCheckpoint { path: path.to_path_buf(), detail };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| corrupt("file shorter than the header".into()))?;
        if magic != MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header".into()))?;
        if version != VERSION {
            return Err(corrupt(format!("format version {version}, expected {VERSION}")));
        }
        let count = r.u32().ok_or_else(|| corrupt("truncated header".into()))?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let trunc = || corrupt(format!("truncated in tensor {i} of {count}"));
            let len = r.u32().ok_or_else(trunc)? as usize;
            let name = r.take(len).ok_or_else(trunc)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?;
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(trunc)?;
            let raw = r.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Writes to a sibling `.partial` file first and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit the checkpoint's u32 fields")))
}

/// Splits a u64 into four 16-bit pieces, each exact in f32.
fn u64_to_tensor(x: u64) -> Tensor<f32> {
    let parts = (0..4).map(|i| ((x >> (16 * i)) & 0xffff) as f32).collect();
    Tensor::new(vec![4], parts).expect("four extents")
}

fn tensor_to_u64(t: &Tensor<f32>) -> Option<u64> {
    if t.shape() != [4] {
        return None;
    }
    t.data().iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
        (v >= 0.0 && v <= 65535.0 && v.fract() == 0.0).then(|| acc | (v as u64) << (16 * i))
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    state: Option<&OptimizerState<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<f32>)> =
        model.names().iter().cloned().zip(model.params().iter().map(Tensor::cast)).collect();
    tensors.push((META_EPOCH.into(), Tensor::new(vec![1], vec![meta.epoch as f32])?));
    tensors.push((META_ACCURACY.into(), Tensor::new(vec![1], vec![meta.val_accuracy])?));
    tensors.push((META_HASH.into(), u64_to_tensor(meta.config_hash)));
    if let Some(s) = state {
        tensors.push((META_STEP.into(), u64_to_tensor(s.t)));
        for (name, m) in model.names().iter().zip(&s.m) {
            tensors.push((format!("optim.m.{name}"), m.cast()));
        }
        for (name, v) in model.names().iter().zip(&s.v) {
            tensors.push((format!("optim.v.{name}"), v.cast()));
        }
    }
    Checkpoint { tensors }.write(path)
}

/// A checkpoint loaded against a configuration.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub model: Model<T>,
    pub state: Option<OptimizerState<T>>,
    pub meta: CheckpointMeta,
    /// False when `force` let a config-hash mismatch through.
    pub hash_matches: bool,
}

/// Loads parameters into a fresh model for `config`.
///
/// Every model tensor must be present with the expected shape and no extra
/// model tensor may appear; the first offender is named. A config-hash
/// mismatch is an error unless `force` is set.
pub fn load_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig, force: bool) -> Result<Loaded<T>> {
    let ckpt = Checkpoint::read(path)?;
    let corrupt = |detail: String| Error::CorruptCheckpoint { path: path.to_path_buf(), detail };
    let mut model = Model::<T>::build(config, 0)?;
    let reserved = |n: &str| n.starts_with("meta.") || n.starts_with("optim.");
    let names = model.names().to_vec();
    for (name, _) in ckpt.tensors.iter().filter(|(n, _)| !reserved(n)) {
        if !names.contains(name) {
            return Err(Error::CheckpointMismatch { name: name.clone(), detail: "not part of this model".into() });
        }
    }
    for (i, name) in names.iter().enumerate() {
        let t = ckpt.get(name).ok_or_else(|| Error::CheckpointMismatch {
            name: name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        let expected = model.params()[i].shape();
        if t.shape() != expected {
            return Err(Error::CheckpointMismatch {
                name: name.clone(),
                detail: format!("shape {:?}, model expects {expected:?}", t.shape()),
            });
        }
        model.params_mut()[i] = t.cast();
    }
    let scalar = |n: &str| match ckpt.get(n) {
        Some(t) if t.len() == 1 => Ok(t.data()[0]),
        _ => Err(corrupt(format!("missing or malformed `{n}`"))),
    };
    let epoch = scalar(META_EPOCH)?;
    if !(epoch >= 0.0 && epoch.fract() == 0.0) {
        return Err(corrupt(format!("epoch {epoch} is not a whole number")));
    }
    let config_hash = ckpt
        .get(META_HASH)
        .and_then(tensor_to_u64)
        .ok_or_else(|| corrupt(format!("missing or malformed `{META_HASH}`")))?;
    let meta = CheckpointMeta { epoch: epoch as u32, val_accuracy: scalar(META_ACCURACY)?, config_hash };
    let hash_matches = config_hash == config.hash();
    if !hash_matches && !force {
        return Err(Error::ConfigHashMismatch { expected: config.hash(), found: config_hash });
    }
    let state = match ckpt.get(META_STEP) {
        None => None,
        Some(step) => {
            let t = tensor_to_u64(step).ok_or_else(|| corrupt(format!("malformed `{META_STEP}`")))?;
            let moment = |kind: &str| {
                names
                    .iter()
                    .zip(model.params())
                    .map(|(n, p)| {
                        let key = format!("optim.{kind}.{n}");
                        match ckpt.get(&key) {
                            Some(m) if m.shape() == p.shape() => Ok(m.cast()),
                            _ => Err(Error::CheckpointMismatch { name: key, detail: "missing or misshapen".into() }),
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            };
            Some(OptimizerState { m: moment("m")?, v: moment("v")?, t })
        }
    };
    Ok(Loaded { model, state, meta, hash_matches })
}
