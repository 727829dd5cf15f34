//! Named-tensor weights container.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LFCW"
//! version u32      currently 1
//! count   u32      number of entries
//! entry:  name_len u32, name utf-8 bytes,
//!         dtype    u8  (0 = f32),
//!         rank     u8  (1..=4),
//!         dims     rank x u32,
//!         data     prod(dims) x f32
//! ```
//!
//! Entries are written in name order, names are unique, and values are
//! required to be finite, so save/load round-trips are bit-exact and
//! deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory view of a weights container: a sorted name -> tensor map.
#[derive(Debug, Default, Clone)]
pub struct Store {
    map: BTreeMap<String, Entry>,
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn any_name_contains(&self, needle: &str) -> bool {
        self.map.keys().any(|k| k.contains(needle))
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Weights(format!("duplicate entry name `{name}`")));
        }
        if dims.is_empty() || dims.len() > 4 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Weights(format!("entry `{name}` has bad dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Weights(format!(
                "entry `{name}`: dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Weights(format!("entry `{name}` holds non-finite values")));
        }
        self.map.insert(name.to_string(), Entry { dims, data });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let (n, c, h, w) = t.shape();
        self.insert(name, vec![n, c, h, w], t.data().to_vec())
    }

    pub fn insert_vec(&mut self, name: &str, v: &[f32]) -> Result<()> {
        self.insert(name, vec![v.len()], v.to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.map.get(name)
    }

    /// Remove and return an entry; loading is consumption so that leftovers
    /// can be reported as unknown names afterwards.
    pub fn take(&mut self, name: &str) -> Result<Entry> {
        self.map
            .remove(name)
            .ok_or_else(|| Error::Weights(format!("missing entry `{name}`")))
    }

    pub fn take_tensor4(&mut self, name: &str) -> Result<Tensor> {
        let e = self.take(name)?;
        if e.dims.len() != 4 {
            return Err(Error::Weights(format!(
                "entry `{name}` has rank {} where 4 was expected",
                e.dims.len()
            )));
        }
        Tensor::from_vec(e.dims[0], e.dims[1], e.dims[2], e.dims[3], e.data)
    }

    pub fn take_vec(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let e = self.take(name)?;
        if e.dims != [len] {
            return Err(Error::Weights(format!(
                "entry `{name}` has dims {:?} where [{len}] was expected",
                e.dims
            )));
        }
        Ok(e.data)
    }

    /// Names still present; a loader calls this after consuming everything it
    /// understands and treats a non-empty answer as a hard error.
    pub fn remaining(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    // ── Serialization ────────────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.map.len() as u32).to_le_bytes());
        for (name, e) in &self.map {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0u8); // dtype f32
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Weights(format!(
                "bad magic {:?}, not a weights container",
                &magic[..4.min(magic.len())]
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = Store::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.bytes(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Weights("entry name is not valid UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Weights(format!(
                    "entry `{name}` has unsupported dtype code {dtype}"
                )));
            }
            let rank = r.u8()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Weights(format!("entry `{name}` has bad rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.bytes(n * 4)?;
            let mut data = Vec::with_capacity(n);
            for ch in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
            }
            store.insert(&name, dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Weights(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::seqio::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Weights("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Write `bytes` to `path` through a temp file + rename so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::seqio::atomic_write(path, bytes)
}

#[allow(dead_code)]
fn _unused(_w: &mut dyn Write) {}
