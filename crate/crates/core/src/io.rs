//! The `ATLR` named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ATLR"  version:u8 (=1)  count:u32
//! repeated count times:
//!     name_len:u16  name:utf8[name_len]
//!     dtype:u8 (0 = f32, 1 = u8)  ndim:u8  dims:u32[ndim]
//!     payload: product(dims) elements, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATLR";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl EntryData {
    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::U8(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: EntryData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: EntryData::F32(data),
        }
    }

    pub fn u8(name: impl Into<String>, dims: &[usize], data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: EntryData::U8(data),
        }
    }

    /// A one-dimensional byte entry holding UTF-8 text.
    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Self::u8(name, &[text.len()], text.as_bytes().to_vec())
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            EntryData::F32(v) => Ok(v),
            EntryData::U8(_) => Err(Error::Format {
                offset: 0,
                message: format!("entry `{}` is not f32", self.name),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            EntryData::U8(v) => Ok(v),
            EntryData::F32(_) => Err(Error::Format {
                offset: 0,
                message: format!("entry `{}` is not u8", self.name),
            }),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        std::str::from_utf8(self.as_u8()?).map_err(|e| Error::Format {
            offset: 0,
            message: format!("entry `{}` is not UTF-8: {e}", self.name),
        })
    }
}

/// An ordered list of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing entry `{name}`"),
            })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("entry name too long: {}", e.name)))?;
            let ndim = u8::try_from(e.dims.len())
                .map_err(|_| Error::Contract(format!("too many dims in `{}`", e.name)))?;
            let numel: usize = e.dims.iter().map(|&d| d as usize).product();
            if numel != e.data.len() {
                return Err(Error::Contract(format!(
                    "entry `{}` has dims {:?} but {} values",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype());
            out.push(ndim);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => {
                    out.reserve(v.len() * 4);
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                EntryData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format {
                    offset: name_at,
                    message: format!("entry name is not UTF-8: {e}"),
                })?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| Error::Format {
                    offset: dtype_at,
                    message: "dimension product overflows".into(),
                })?;
            let data = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format {
                        offset: r.pos,
                        message: "payload size overflows".into(),
                    })?)?;
                    EntryData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                1 => EntryData::U8(r.take(numel)?.to_vec()),
                other => {
                    return Err(Error::Format {
                        offset: dtype_at,
                        message: format!("unknown dtype {other}"),
                    })
                }
            };
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
