//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "OVMA"
//! version    u32      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   dtype    u8       0 = f32
//!   ndim     u8
//!   dims     ndim x u32
//!   payload  product(dims) x f32, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"OVMA";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Ordered collection of uniquely named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "tensor name too long ({} bytes)",
                name.len()
            )));
        }
        if tensor.dims().len() > u8::MAX as usize
            || tensor.dims().iter().any(|&d| d > u32::MAX as usize)
        {
            return Err(Error::Validation(format!(
                "tensor {name} has unsupported dims {:?}",
                tensor.dims()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate tensor name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Inserts a tensor of any precision, narrowing to `f32`.
    pub fn insert_cast<T: Scalar>(
        &mut self,
        name: impl Into<String>,
        tensor: &Tensor<T>,
    ) -> Result<()> {
        self.insert(name, tensor.cast())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Reference(format!("archive has no tensor named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("tensor count")?;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| Error::Format {
                    offset: (name_at + 2) as u64,
                    message: format!("tensor name is not UTF-8: {e}"),
                })?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    offset: dtype_at as u64,
                    message: format!("unsupported dtype {dtype} for {name:?}"),
                });
            }
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dim")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    message: format!("dims {dims:?} overflow"),
                })?;
            let payload = r.take(n, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data)?;
            archive.insert(name, tensor).map_err(|e| Error::Format {
                offset: name_at as u64,
                message: e.to_string(),
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(archive)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_archive(path: impl AsRef<Path>, archive: &TensorArchive) -> Result<()> {
    write_atomic(path.as_ref(), &archive.to_bytes())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(&bytes)
}
