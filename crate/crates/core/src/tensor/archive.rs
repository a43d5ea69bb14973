//! Named-tensor container with a SHA-256 integrity trailer.
//!
//! Layout (little endian): `WGTA`, u32 version, u32 count, then per entry
//! u32 name length, UTF-8 name, u8 dtype, u32 rank, u64 dims, raw values;
//! finally `SHA2` and the digest of every preceding byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WGTA";
const TRAILER: &[u8; 4] = b"SHA2";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl ArchiveEntry {
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let size = self.dtype.size();
        let data = self
            .bytes
            .chunks_exact(size)
            .map(|c| match self.dtype {
                DType::F32 => R::of(f32::read_le(c) as f64),
                DType::F64 => R::of(f64::read_le(c)),
            })
            .collect();
        Tensor::new(&self.shape, data).expect("validated on read")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<ArchiveEntry>,
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

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    /// Appends a tensor in its own precision. Panics on duplicate names.
    pub fn push<R: Real>(&mut self, name: &str, t: &Tensor<R>) {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate archive entry {name}"
        );
        let mut bytes = Vec::with_capacity(t.len() * R::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.entries.push(ArchiveEntry {
            name: name.to_string(),
            dtype: R::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get<R: Real>(&self, name: &str) -> Result<Tensor<R>> {
        self.entry(name)
            .map(ArchiveEntry::to_tensor)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(TRAILER);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Archive(m.to_string());
        if bytes.len() < 12 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a tensor archive"));
        }
        let body_len = bytes.len() - 36;
        let (body, tail) = bytes.split_at(body_len);
        if &tail[..4] != TRAILER {
            return Err(bad("missing integrity trailer"));
        }
        if Sha256::digest(body).as_slice() != &tail[4..] {
            return Err(bad("checksum mismatch; file is corrupt or truncated"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!(
                "unsupported archive version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut archive = TensorArchive::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| bad("unknown dtype"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| bad("entry size overflows"))?;
            let data = r.take(n)?.to_vec();
            if archive.entry(&name).is_some() {
                return Err(Error::Archive(format!("duplicate entry {name}")));
            }
            archive.entries.push(ArchiveEntry {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Archive("archive truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
