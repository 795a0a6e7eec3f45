//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "HAMFCKPT"
//! version    u32      1
//! dtype      u8 len + utf8 ("f32" | "f64")
//! header     u32 len + utf8 JSON {model, train, epoch, step}
//! params     u32 count, then per parameter:
//!              name  u16 len + utf8
//!              rank  u8, dims u64 × rank
//!              data  f64 × numel
//! optimizer  u8 flag (0 = absent, 1 = present), then
//!              step u64, first moments f64 × numel per parameter, second likewise
//! checksum   u64 FNV-1a over every preceding byte
//! ```
//!
//! Values are stored as f64 whatever the model dtype, which is exact for both.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use hamf_tensor::{AdamW, AdamWConfig, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Hamf, ModelConfig};
use crate::training::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"HAMFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub dtype: String,
    pub params: ParamStore<T>,
    /// `(step, first, second)` moments.
    pub optimizer: Option<(u64, Vec<Vec<T>>, Vec<Vec<T>>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn bad(msg: impl Into<String>) -> CoreError {
    CoreError::Checkpoint(msg.into())
}

fn write_values<T: Scalar>(buf: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        buf.write_f64::<LE>(v.to_f64_lossy()).unwrap();
    }
}

fn read_values<T: Scalar>(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<T>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if (n as u64).saturating_mul(8) > remaining {
        return Err(bad("truncated tensor data"));
    }
    (0..n).map(|_| Ok(T::from_f64_lossy(r.read_f64::<LE>().map_err(|_| bad("truncated tensor data"))?))).collect()
}

fn read_str(r: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| bad("truncated string"))?;
    String::from_utf8(b).map_err(|_| bad("string is not utf-8"))
}

pub fn encode<T: Scalar>(header: &CheckpointHeader, params: &ParamStore<T>, optimizer: Option<&AdamW<T>>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LE>(VERSION).unwrap();
    buf.write_u8(T::DTYPE.len() as u8).unwrap();
    buf.extend_from_slice(T::DTYPE.as_bytes());
    let json = serde_json::to_string(header).expect("header serializes");
    buf.write_u32::<LE>(json.len() as u32).unwrap();
    buf.extend_from_slice(json.as_bytes());
    buf.write_u32::<LE>(params.len() as u32).unwrap();
    for id in params.ids() {
        let name = params.name(id);
        buf.write_u16::<LE>(name.len() as u16).unwrap();
        buf.extend_from_slice(name.as_bytes());
        let t = params.get(id);
        buf.write_u8(t.shape().len() as u8).unwrap();
        for &d in t.shape() {
            buf.write_u64::<LE>(d as u64).unwrap();
        }
        write_values(&mut buf, t.data());
    }
    match optimizer {
        Some(opt) => {
            buf.write_u8(1).unwrap();
            buf.write_u64::<LE>(opt.step_count()).unwrap();
            for m in opt.first_moments().iter().chain(opt.second_moments()) {
                write_values(&mut buf, m);
            }
        }
        None => buf.write_u8(0).unwrap(),
    }
    let sum = fnv1a(&buf);
    buf.write_u64::<LE>(sum).unwrap();
    buf
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(bad("checksum mismatch (file is corrupt or truncated)"));
    }
    let mut r = Cursor::new(body);
    r.set_position(8);
    let version = r.read_u32::<LE>().map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(CoreError::Version { found: version.to_string(), expected: "1" });
    }
    let n = r.read_u8().map_err(|_| bad("truncated header"))? as usize;
    let dtype = read_str(&mut r, n)?;
    let n = r.read_u32::<LE>().map_err(|_| bad("truncated header"))? as usize;
    let json = read_str(&mut r, n)?;
    let header: CheckpointHeader = serde_json::from_str(&json).map_err(|e| bad(format!("header: {e}")))?;

    let count = r.read_u32::<LE>().map_err(|_| bad("truncated parameter table"))? as usize;
    let mut params = ParamStore::new();
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.read_u16::<LE>().map_err(|_| bad("truncated parameter table"))? as usize;
        let name = read_str(&mut r, n)?;
        let rank = r.read_u8().map_err(|_| bad("truncated parameter table"))? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(|_| bad("truncated shape")))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let data = read_values(&mut r, numel)?;
        params.add(name, Tensor::new(shape, data)?);
        sizes.push(numel);
    }
    let optimizer = match r.read_u8().map_err(|_| bad("truncated optimizer flag"))? {
        0 => None,
        1 => {
            let step = r.read_u64::<LE>().map_err(|_| bad("truncated optimizer state"))?;
            let mut moments = Vec::with_capacity(2 * count);
            for &n in sizes.iter().chain(&sizes) {
                moments.push(read_values(&mut r, n)?);
            }
            let second = moments.split_off(count);
            Some((step, moments, second))
        }
        f => return Err(bad(format!("unknown optimizer flag {f}"))),
    };
    if r.position() != body.len() as u64 {
        return Err(bad("trailing bytes after optimizer state"));
    }
    Ok(Checkpoint { header, dtype, params, optimizer })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model(&self) -> Result<Hamf<T>> {
        Hamf::from_params(self.header.model.clone(), self.params.clone())
    }

    /// Rebuilds a trainer positioned where the checkpoint left off.
    pub fn trainer(&self) -> Result<Trainer<T>> {
        let mut trainer = Trainer::new(self.model()?, self.header.train.clone())?;
        trainer.epoch = self.header.epoch;
        trainer.step = self.header.step;
        if let Some((step, first, second)) = &self.optimizer {
            let cfg = AdamWConfig { weight_decay: self.header.train.weight_decay, ..AdamWConfig::default() };
            trainer.optimizer = AdamW::from_state(cfg, *step, first.clone(), second.clone());
        }
        Ok(trainer)
    }
}

pub fn header_of<T: Scalar>(trainer: &Trainer<T>) -> CheckpointHeader {
    CheckpointHeader {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
    }
}

pub fn save_trainer<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let bytes = encode(&header_of(trainer), &trainer.model.params, Some(&trainer.optimizer));
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}
