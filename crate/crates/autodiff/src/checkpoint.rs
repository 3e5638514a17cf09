//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "USAD"  u16 version  u32 count
//! count × { u32 name_len, name (UTF-8), u8 dtype, u8 rank, rank × u32 dim, payload }
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = raw bytes (rank 1, used for text blobs).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"USAD";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl EntryData {
    fn tag(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::Bytes(_) => 2,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            EntryData::F32(t) => t.shape().to_vec(),
            EntryData::F64(t) => t.shape().to_vec(),
            EntryData::Bytes(b) => vec![b.len()],
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::Bytes(_) => "bytes",
        }
    }

    pub fn as_f64(&self) -> Option<Tensor<f64>> {
        match self {
            EntryData::F32(t) => Some(t.cast()),
            EntryData::F64(t) => Some(t.clone()),
            EntryData::Bytes(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: EntryData) {
        self.entries.push(Entry {
            name: name.into(),
            data,
        });
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.push(name, EntryData::Bytes(text.as_bytes().to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.data)
    }

    pub fn text(&self, name: &str) -> Option<String> {
        match self.get(name)? {
            EntryData::Bytes(b) => String::from_utf8(b.clone()).ok(),
            _ => None,
        }
    }

    /// Appends every parameter under `prefix + name`.
    pub fn push_params<T: Element>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, p) in store.iter() {
            let data = match T::DTYPE {
                DType::F64 => EntryData::F64(p.value.cast()),
                DType::F32 => EntryData::F32(p.value.cast()),
            };
            self.push(format!("{prefix}{}", p.name), data);
        }
    }

    /// Copies `prefix + name` entries into the same-named parameters of `store`.
    pub fn load_params<T: Element>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let t = self
                .get(&key)
                .and_then(EntryData::as_f64)
                .ok_or_else(|| Error::MissingParam(key.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.tag());
            let shape = e.data.shape();
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?;
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => {
                    let raw = r.take(n * 4)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F32(Tensor::new(&shape, v).map_err(|e| Error::Corrupt(e.to_string()))?)
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    EntryData::F64(Tensor::new(&shape, v).map_err(|e| Error::Corrupt(e.to_string()))?)
                }
                2 if rank == 1 => EntryData::Bytes(r.take(n)?.to_vec()),
                _ => return Err(Error::Corrupt(format!("unknown dtype tag {tag} (rank {rank})"))),
            };
            entries.push(Entry { name, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
