//! Binary checkpoint format. All integers are little-endian.
//!
//! ```text
//! "RSFM" | u32 version | u32 tensor count
//! per tensor: u32 name length | name | u32 rank | u64 dims.. | f32 values..
//! u64 optimizer blob length | optimizer blob
//! u64 config length | UTF-8 config text
//! ```
//!
//! The optimizer blob holds `u8 has_state`, then when set `f64 lr`,
//! `f64 momentum`, `u32 velocity count` and velocities as named tensors with
//! f64 values; then the progress fields `u32 epoch`, `u64 step`,
//! `u8 has_best`, `f64 best`.

use std::collections::BTreeMap;
use std::path::Path;

use rsfme_tensor::Tensor;

use super::{OptimizerState, Progress};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 4] = b"RSFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub progress: Progress,
    pub config: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_header(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
}

impl Checkpoint {
    /// Serialises the checkpoint. Parameter values are stored as f32, so values
    /// that are not exactly representable in single precision are rounded.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_header(&mut out, name, t);
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut blob = Vec::new();
        match &self.optimizer {
            None => blob.push(0),
            Some(opt) => {
                blob.push(1);
                blob.extend_from_slice(&opt.lr.to_le_bytes());
                blob.extend_from_slice(&opt.momentum.to_le_bytes());
                put_u32(&mut blob, opt.velocity.len() as u32);
                for (name, t) in &opt.velocity {
                    put_header(&mut blob, name, t);
                    for &v in t.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        put_u32(&mut blob, self.progress.epoch as u32);
        put_u64(&mut blob, self.progress.step);
        match self.progress.best_metric {
            None => blob.extend_from_slice(&[0; 9]),
            Some(b) => {
                blob.push(1);
                blob.extend_from_slice(&b.to_le_bytes());
            }
        }
        put_u64(&mut out, blob.len() as u64);
        out.extend_from_slice(&blob);
        put_u64(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, shape) = r.header()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| corrupt("tensor too large"))?,
                "tensor values",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(&format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(&format!("duplicate tensor {name}")));
            }
        }
        let blob_len = r.u64("optimizer length")? as usize;
        let blob = r.take(blob_len, "optimizer blob")?;
        let (optimizer, progress) = decode_blob(blob)?;
        let config_len = r.u64("config length")? as usize;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| corrupt("config snapshot is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(corrupt(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            optimizer,
            progress,
            config,
        })
    }
}

fn decode_blob(
    blob: &[u8],
) -> std::result::Result<(Option<OptimizerState>, Progress), CheckpointError> {
    let mut r = Reader {
        bytes: blob,
        pos: 0,
    };
    let optimizer = match r.take(1, "optimizer flag")?[0] {
        0 => None,
        1 => {
            let lr = r.f64("learning rate")?;
            let momentum = r.f64("momentum")?;
            let n = r.u32("velocity count")?;
            let mut velocity = BTreeMap::new();
            for _ in 0..n {
                let (name, shape) = r.header()?;
                let count: usize = shape.iter().product();
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    data.push(r.f64("velocity values")?);
                }
                let t = Tensor::new(&shape, data).map_err(|e| corrupt(&format!("{name}: {e}")))?;
                velocity.insert(name, t);
            }
            Some(OptimizerState {
                lr,
                momentum,
                velocity,
            })
        }
        f => return Err(corrupt(&format!("bad optimizer flag {f}"))),
    };
    let epoch = r.u32("epoch")? as usize;
    let step = r.u64("step")?;
    let has_best = r.take(1, "best flag")?[0];
    let best = r.f64("best metric")?;
    let progress = Progress {
        epoch,
        step,
        best_metric: (has_best == 1).then_some(best),
    };
    if r.pos != blob.len() {
        return Err(corrupt("optimizer blob has trailing bytes"));
    }
    Ok((optimizer, progress))
}

fn corrupt(msg: &str) -> CheckpointError {
    CheckpointError::Corrupt(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(&format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, what: &str) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn header(&mut self) -> std::result::Result<(String, Vec<usize>), CheckpointError> {
        let len = self.u32("name length")? as usize;
        let name = String::from_utf8(self.take(len, "name")?.to_vec())
            .map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = self.u64("dims")?;
            if d == 0 {
                return Err(corrupt(&format!("{name}: zero extent")));
            }
            shape.push(d as usize);
        }
        Ok((name, shape))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::decode(&bytes)?)
}
