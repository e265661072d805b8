//! Binary weights file.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic    8 bytes  "CHAIW001"
//! version  u32      1
//! count    u32      number of tensor records
//! record*  name_len u32, name (UTF-8), rank u32, extents u32 * rank, payload f32 * product(extents)
//! ```
//!
//! Records are written in parameter name order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, GROUP_FEATURES};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"CHAIW001";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Corrupt(format!("{} truncated at byte {} (needed {n} more)", self.what, self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt(format!("{}: invalid UTF-8 string", self.what)))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Decodes a weights file. Every tensor gets the `features` group; use
/// [`load_weights_for`] to validate against a model and assign groups.
pub fn decode_weights(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(bytes, "weights file");
    let magic = r.take(8)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n
            .filter(|&n| n > 0 && n <= bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("{name}: bad extents {shape:?}")))?;
        let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        params
            .insert(&name, GROUP_FEATURES, Tensor::new(shape, data)?)
            .map_err(|_| Error::Corrupt(format!("duplicate tensor {name}")))?;
    }
    r.finish()?;
    Ok(params)
}

pub fn save_weights(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_weights(params))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamSet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_weights(&buf)
}

/// Loads weights and checks them against `config`'s shape table.
pub fn load_weights_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ParamSet> {
    let raw = load_weights(path)?;
    config.check_params(&raw).map_err(|e| Error::Format(format!("weights do not match model config: {e}")))?;
    let mut params = ParamSet::new();
    let groups = crate::model::init_model(config)?;
    for (name, t) in raw.iter() {
        params.insert(name, groups.group(name).unwrap_or(GROUP_FEATURES), t.clone())?;
    }
    Ok(params)
}
