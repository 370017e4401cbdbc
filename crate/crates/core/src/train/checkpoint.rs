//! Single-file binary checkpoint.
//!
//! Layout (all integers little-endian):
//! `"UVCK"`, version `u32`, model config length `u32` + key=value text,
//! parameter count `u32` + tensor records, state count `u32` + tensor records.
//! A tensor record is name length `u32`, name bytes, dtype tag `u8`, rank
//! `u32`, dims `u32 × rank`, then the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::AdamState;
use crate::model::{Model, ModelConfig, ParamStore};
use crate::numerics::{DType, Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exponential moving averages of the per-task losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub asr: f64,
    pub tts: f64,
}

impl LossStats {
    const DECAY: f64 = 0.98;

    pub(crate) fn update(&mut self, asr: Option<f64>, tts: Option<f64>, first: bool) {
        let ema = |acc: &mut f64, x: f64| *acc = if first { x } else { Self::DECAY * *acc + (1.0 - Self::DECAY) * x };
        if let Some(x) = asr {
            ema(&mut self.asr, x);
        }
        if let Some(x) = tts {
            ema(&mut self.tts, x);
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T = f32> {
    pub model: Model<T>,
    pub opt: AdamState<T>,
    /// Root of the per-step random streams.
    pub seed: u64,
    pub stats: LossStats,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, seed: u64) -> Self {
        let opt = AdamState::new(model.store());
        Self { model, opt, seed, stats: LossStats::default() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = self.model.cfg().to_kv();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());

        let store = self.model.store();
        put_u32(&mut out, store.len() as u32);
        for p in store.iter() {
            put_record(&mut out, &p.name, T::DTYPE, p.tensor.shape(), |o| p.tensor.data().iter().for_each(|x| x.write_le(o)));
        }

        put_u32(&mut out, (4 + 2 * store.len()) as u32);
        put_record(&mut out, "opt.step", DType::U64, &[1], |o| o.extend_from_slice(&self.opt.step.to_le_bytes()));
        put_record(&mut out, "rng.seed", DType::U64, &[1], |o| o.extend_from_slice(&self.seed.to_le_bytes()));
        put_record(&mut out, "stats.asr", DType::F64, &[1], |o| o.extend_from_slice(&self.stats.asr.to_le_bytes()));
        put_record(&mut out, "stats.tts", DType::F64, &[1], |o| o.extend_from_slice(&self.stats.tts.to_le_bytes()));
        for (kind, bufs) in [("m", &self.opt.m), ("v", &self.opt.v)] {
            for (p, buf) in store.iter().zip(bufs) {
                put_record(&mut out, &format!("opt.{kind}.{}", p.name), T::DTYPE, p.tensor.shape(), |o| {
                    buf.iter().for_each(|x| x.write_le(o))
                });
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format("model config is not UTF-8".into()))?;
        let cfg = ModelConfig::from_kv(cfg_text)?;

        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let rec = r.record()?;
            let data = rec.values::<T>()?;
            store.insert(rec.name, Tensor::new(rec.dims, data)?, false);
        }
        let model = Model::from_store(cfg, store)?;

        let n_state = r.u32()? as usize;
        let mut state: Vec<Record> = (0..n_state).map(|_| r.record()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        let mut take = |name: &str| -> Result<Record> {
            let i = state
                .iter()
                .position(|rec| rec.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks state `{name}`")))?;
            Ok(state.swap_remove(i))
        };
        let step = take("opt.step")?.scalar_u64()?;
        let seed = take("rng.seed")?.scalar_u64()?;
        let stats = LossStats { asr: take("stats.asr")?.scalar_f64()?, tts: take("stats.tts")?.scalar_f64()? };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.store().iter() {
            for (kind, dst) in [("m", &mut m), ("v", &mut v)] {
                let rec = take(&format!("opt.{kind}.{}", p.name))?;
                if rec.dims != p.tensor.shape() {
                    return Err(Error::Format(format!("moment `{}` has shape {:?}", rec.name, rec.dims)));
                }
                dst.push(rec.values::<T>()?);
            }
        }
        Ok(Self { model, opt: AdamState { step, m, v }, seed, stats })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`, and
    /// removed if anything fails.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, dtype: DType, dims: &[usize], payload: impl FnOnce(&mut Vec<u8>)) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    put_u32(out, dims.len() as u32);
    dims.iter().for_each(|&d| put_u32(out, d as u32));
    payload(out);
}

struct Record {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

impl Record {
    fn values<T: Real>(&self) -> Result<Vec<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("`{}` stored as {:?}, expected {:?}", self.name, self.dtype, T::DTYPE)));
        }
        Ok(self.payload.chunks_exact(self.dtype.size()).map(T::read_le).collect())
    }

    fn scalar_bytes(&self, dtype: DType) -> Result<[u8; 8]> {
        if self.dtype != dtype || self.payload.len() != 8 {
            return Err(Error::Format(format!("`{}` is not a {dtype:?} scalar", self.name)));
        }
        Ok(self.payload[..8].try_into().expect("length checked"))
    }

    fn scalar_u64(&self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.scalar_bytes(DType::U64)?))
    }

    fn scalar_f64(&self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.scalar_bytes(DType::F64)?))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("`{name}` has unknown dtype tag {tag}")))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("`{name}` has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let bytes = numel.checked_mul(dtype.size()).ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let payload = self.take(bytes)?.to_vec();
        Ok(Record { name, dtype, dims, payload })
    }
}
