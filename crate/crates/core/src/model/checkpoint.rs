//! Binary checkpoint container.
//!
//! ```text
//! "GMBA" | version: u32 | scalar bytes: u32
//! config length: u64 | config JSON
//! buffer count: u64
//! per buffer: name length: u64 | name | rank: u64 | dims: u64 × rank
//!             | element count: u64 | elements (little-endian floats)
//! ```
//!
//! All integers are little-endian. Buffers appear in registration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tensor};
use crate::scalar::Scalar;

use super::{GroupMambaModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GMBA";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(model: &GroupMambaModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    let json = model.config.to_json();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    write_store(&model.store, &mut out);
    out
}

pub(crate) fn write_store<T: Scalar>(store: &ParamStore<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u64).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(e.value.len() as u64).to_le_bytes());
        for &v in e.value.data() {
            v.write_le(out);
        }
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A length field that must fit in the remaining input.
    pub(crate) fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let at = self.offset();
        let n = self.u64(what)?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(Error::format(at, format!("{what} {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<GroupMambaModel<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected GMBA"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let width = r.u32("scalar width")?;
    if width as usize != T::BYTES {
        return Err(Error::format(
            at,
            format!("checkpoint holds {width}-byte floats, loading as {}", T::NAME),
        ));
    }
    let n = r.len("config length", 1)?;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|e| Error::format(at, format!("config is not UTF-8: {e}")))?;
    let config = ModelConfig::from_json(text).map_err(|e| Error::format(at, format!("config: {e}")))?;
    let mut model = GroupMambaModel::build(&config, &Rng::new(0))?;
    let loaded = read_store::<T>(&mut r)?;
    r.finish()?;
    model.store.load_values(&loaded)?;
    Ok(model)
}

pub(crate) fn read_store<T: Scalar>(r: &mut Reader<'_>) -> Result<ParamStore<T>> {
    let count = r.len("buffer count", 8)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.len("name length", 1)?;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|e| Error::format(at, format!("buffer name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.len("rank", 8)?;
        let dims = (0..rank)
            .map(|_| r.u64("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let len = r.len("element count", T::BYTES)?;
        let data = r
            .take(len * T::BYTES, "elements")?
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        let value = Tensor::new(&dims, data)
            .map_err(|e| Error::format(at, format!("buffer {name}: {e}")))?;
        store.add(name, value, false);
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(model: &GroupMambaModel<T>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<GroupMambaModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
