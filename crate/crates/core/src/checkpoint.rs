//! Named-tensor binary container.
//!
//! Layout (little-endian): magic `V2NC`, format version `u32`, tensor count
//! `u32`, then per tensor a `u16` name length and UTF-8 name, dtype code
//! `u8` (0 = f32, 1 = f64), `u8` rank, `u32` dims and the raw payload.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"V2NC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name}: dtype code {found}, expected {expected}")]
    DtypeMismatch { name: String, found: u8, expected: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub fn encode<T: Scalar>(tensors: &[NamedTensor<T>]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() || t.shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Malformed(format!("{}: shape {:?}", t.name, t.shape)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE_CODE);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Malformed(format!("dim {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<NamedTensor<T>>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_string();
        let head = r.take(2, "dtype")?;
        let (dtype, ndim) = (head[0], head[1] as usize);
        if dtype != T::DTYPE_CODE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                found: dtype,
                expected: T::DTYPE_CODE,
            });
        }
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * T::BYTES, "payload")?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[NamedTensor<T>]) -> Result<(), CheckpointError> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<NamedTensor<T>>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor<f32>> {
        vec![
            NamedTensor {
                name: "enc0.w".into(),
                shape: vec![2, 1, 3],
                data: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![1],
                data: vec![0.1],
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        // 4 + 4 + 4 header, then (2 + 6 + 2 + 12 + 24) + (2 + 1 + 2 + 4 + 4)
        assert_eq!(bytes.len(), 12 + 46 + 13);
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in t.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode(&sample()).unwrap();
        assert!(matches!(decode::<f64>(&bytes), Err(CheckpointError::DtypeMismatch { .. })));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
        bytes[4] = 2;
        assert!(matches!(
            decode::<f32>(&bytes),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(CheckpointError::BadMagic)));
    }
}
