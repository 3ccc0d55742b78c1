//! Binary embedding container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CNAN"
//! 4       4     format version, u32 LE (currently 1)
//! 8       4     d, u32 LE
//! 12      8     count, u64 LE
//! 20      1     float width in bytes, 4 or 8
//! 21      n     count·d floats, LE, row-major
//! 21+n    8     FNV-1a 64 of the payload bytes, u64 LE
//! ```

use std::path::Path;

use super::{checksum, read_file, write_file, Reader};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CNAN";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            4 => Ok(FloatWidth::F32),
            8 => Ok(FloatWidth::F64),
            other => Err(Error::Schema(format!("float width {other} is not 4 or 8"))),
        }
    }
}

/// `count` rows of `d` values. Values are held as `f64`, which represents
/// both storage widths exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingContainer {
    pub d: usize,
    pub width: FloatWidth,
    pub values: Vec<f64>,
}

impl EmbeddingContainer {
    pub fn new(d: usize, width: FloatWidth, values: Vec<f64>) -> Result<Self> {
        if d == 0 || d > u32::MAX as usize {
            return Err(Error::Schema(format!("container dimension {d} out of range")));
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::Schema(format!(
                "{} values do not fill rows of {d}",
                values.len()
            )));
        }
        Ok(EmbeddingContainer { d, width, values })
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Serialized bytes. `F32` rounds each value to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * self.width.bytes() + 8);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.push(self.width.bytes() as u8);
        for &v in &self.values {
            match self.width {
                FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let sum = checksum(&out[HEADER_LEN..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "container");
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::Schema("not an embedding container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let d = r.u32()? as usize;
        let count = r.u64()?;
        let width = FloatWidth::from_byte(r.u8()?)?;
        if d == 0 {
            return Err(Error::Schema("container dimension is 0".into()));
        }
        let n = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(d))
            .and_then(|v| v.checked_mul(width.bytes()))
            .ok_or_else(|| Error::Schema(format!("count {count} overflows")))?;
        if r.remaining() != n + 8 {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, header implies {}",
                r.remaining().saturating_sub(8),
                n
            )));
        }
        let payload = r.take(n)?;
        let stored = r.u64()?;
        if checksum(payload) != stored {
            return Err(Error::Integrity("container checksum mismatch".into()));
        }
        let values = match width {
            FloatWidth::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            FloatWidth::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(EmbeddingContainer { d, width, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
