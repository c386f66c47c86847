//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSTN"  version:u8
//! config_len:u32  config text (key = value lines, UTF-8)
//! epoch:u64  adam_step:u64  best_dev_wer:f64
//! rng_seed:u64  rng_stream:u64  rng_word_pos:u128
//! array_count:u32
//! per array: name_len:u32 name  ndim:u32 dims:u64*ndim  values:f64*numel
//! ```
//!
//! Arrays are the parameters as `param/<name>` followed by the optimizer
//! moments as `adam.m/<name>` and `adam.v/<name>`, all in parameter order.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSTN";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u8,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    /// Best dev WER seen so far; infinite before the first evaluation.
    pub best_dev_wer: f64,
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.0.read_exact(&mut v)?;
        Ok(v)
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.vec(len)?).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Data("string too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_array(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_str(w, name)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.version])?;
        put_str(w, &self.config.to_text())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        w.write_all(&self.best_dev_wer.to_le_bytes())?;
        w.write_all(&self.rng.seed.to_le_bytes())?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let n = self.params.len();
        w.write_all(&((3 * n) as u32).to_le_bytes())?;
        for (_, name, t) in self.params.iter() {
            put_array(w, &format!("param/{name}"), t.shape(), t.data())?;
        }
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((_, name, t), m) in self.params.iter().zip(moments.iter()) {
                put_array(w, &format!("{prefix}/{name}"), t.shape(), m)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut rd = Reader(r);
        if &rd.bytes::<4>()? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = rd.bytes::<1>()?[0];
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig::from_text(&rd.string()?)?;
        let epoch = rd.u64()? as usize;
        let step = rd.u64()?;
        let best_dev_wer = rd.f64()?;
        let rng = RngState {
            seed: rd.u64()?,
            stream: rd.u64()?,
            word_pos: u128::from_le_bytes(rd.bytes()?),
        };
        let count = rd.u32()? as usize;
        if !count.is_multiple_of(3) {
            return Err(Error::Data(format!("checkpoint has {count} arrays, expected a multiple of 3")));
        }
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = rd.string()?;
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            step,
            m: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
        };
        let mut it = arrays.into_iter();
        for (prefix, slot) in [("param/", None), ("adam.m/", Some(0)), ("adam.v/", Some(1))] {
            for i in 0..n {
                let (name, t) = it.next().expect("count checked");
                let Some(bare) = name.strip_prefix(prefix) else {
                    return Err(Error::Data(format!("unexpected array `{name}`")));
                };
                match slot {
                    None => {
                        params.add(bare, t);
                    }
                    Some(k) => {
                        let pid = crate::params::ParamId(i);
                        if params.name(pid) != bare || params.get(pid).shape() != t.shape() {
                            return Err(Error::Data(format!("optimizer array `{name}` out of order")));
                        }
                        let target = if k == 0 { &mut adam.m } else { &mut adam.v };
                        target.push(t.into_data());
                    }
                }
            }
        }
        Ok(Self {
            version,
            config,
            params,
            adam,
            epoch,
            rng,
            best_dev_wer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
