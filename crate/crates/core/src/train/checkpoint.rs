//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CESAACKP`, `u32` version, 32-byte config
//! digest, `u32` section count, then named sections. A section is a `u32`
//! name length, the UTF-8 name, a kind byte and a payload: matrices store
//! `u64` rows, `u64` cols and the `f64` values; byte blobs store a `u64`
//! length and the bytes.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use std::collections::BTreeMap;

pub const MAGIC: &[u8; 8] = b"CESAACKP";
pub const VERSION: u32 = 1;

const KIND_MATRIX: u8 = 0;
const KIND_BYTES: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Matrix(Matrix),
    Bytes(Vec<u8>),
}

/// Ordered sections plus the digest of the configuration they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub digest: [u8; 32],
    pub sections: Vec<(String, Section)>,
}

impl Container {
    pub fn new(digest: [u8; 32]) -> Self {
        Self {
            digest,
            sections: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: Matrix) {
        self.sections.push((name.into(), Section::Matrix(m)));
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, b: Vec<u8>) {
        self.sections.push((name.into(), Section::Bytes(b)));
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, section) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match section {
                Section::Matrix(m) => {
                    out.push(KIND_MATRIX);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    for v in m.as_slice() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Section::Bytes(b) => {
                    out.push(KIND_BYTES);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let section = match r.take(1)?[0] {
                KIND_MATRIX => {
                    let rows = r.u64()? as usize;
                    let cols = r.u64()? as usize;
                    let n = rows
                        .checked_mul(cols)
                        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                        .ok_or_else(|| Error::Format(format!("truncated section {name}")))?;
                    let data = r
                        .take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Section::Matrix(Matrix::from_vec(rows, cols, data))
                }
                KIND_BYTES => {
                    let len = r.u64()? as usize;
                    Section::Bytes(r.take(len)?.to_vec())
                }
                kind => {
                    return Err(Error::Format(format!(
                        "section {name}: unknown kind {kind}"
                    )))
                }
            };
            sections.push((name, section));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { digest, sections })
    }

    /// Index sections by name, rejecting duplicates.
    pub fn into_map(self) -> Result<SectionMap> {
        let mut map = BTreeMap::new();
        for (name, s) in self.sections {
            if map.insert(name.clone(), s).is_some() {
                return Err(Error::Format(format!("duplicate section {name}")));
            }
        }
        Ok(SectionMap(map))
    }
}

pub struct SectionMap(BTreeMap<String, Section>);

impl SectionMap {
    pub fn matrix(&mut self, name: &str) -> Result<Matrix> {
        match self.0.remove(name) {
            Some(Section::Matrix(m)) => Ok(m),
            Some(Section::Bytes(_)) => {
                Err(Error::Format(format!("section {name} is not a matrix")))
            }
            None => Err(Error::Format(format!("missing section {name}"))),
        }
    }

    pub fn bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        match self.0.remove(name) {
            Some(Section::Bytes(b)) => Ok(b),
            Some(Section::Matrix(_)) => Err(Error::Format(format!("section {name} is not bytes"))),
            None => Err(Error::Format(format!("missing section {name}"))),
        }
    }

    pub fn u64(&mut self, name: &str) -> Result<u64> {
        let b = self.bytes(name)?;
        let arr: [u8; 8] = b
            .try_into()
            .map_err(|_| Error::Format(format!("section {name} is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    /// Names left unread.
    pub fn remaining(&self) -> Vec<&str> {
        self.0.keys().map(String::as_str).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
