//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"CLOC"
//! version u32
//! count   u32                          manifest entries
//! entry*  name_len u32, name bytes,
//!         dtype u8, rows u32, cols u32,
//!         offset u64                   into the data section
//! data    raw tensor bytes
//! digest  sha256 of everything above
//! ```
//!
//! The trailing digest catches truncation and bit rot; the manifest makes
//! the container self-describing enough to hold parameters, optimizer
//! moments, RNG state, and the embedded config text side by side.

use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CLOC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checksum mismatch: file is truncated or corrupt")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Corrupt(String),
}

/// One named tensor in the container.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Array2<f32>),
    F64(Array2<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Tensor {
    fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::F64(_) => 1,
            Tensor::U64(_) => 2,
            Tensor::Bytes(_) => 3,
        }
    }

    fn shape(&self) -> (u32, u32) {
        match self {
            Tensor::F32(a) => (a.nrows() as u32, a.ncols() as u32),
            Tensor::F64(a) => (a.nrows() as u32, a.ncols() as u32),
            Tensor::U64(v) => (1, v.len() as u32),
            Tensor::Bytes(v) => (1, v.len() as u32),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            Tensor::F32(a) => {
                for &x in a.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::F64(a) => {
                for &x in a.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::U64(v) => {
                for &x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::Bytes(v) => out.extend_from_slice(v),
        }
    }

    fn read_data(dtype: u8, rows: usize, cols: usize, bytes: &[u8]) -> Result<Tensor, CheckpointError> {
        let n = rows * cols;
        let need = match dtype {
            0 => n * 4,
            1 | 2 => n * 8,
            3 => n,
            other => return Err(CheckpointError::Corrupt(format!("unknown dtype {other}"))),
        };
        if bytes.len() < need {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let bytes = &bytes[..need];
        Ok(match dtype {
            0 => {
                let vals: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F32(Array2::from_shape_vec((rows, cols), vals).unwrap())
            }
            1 => {
                let vals: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F64(Array2::from_shape_vec((rows, cols), vals).unwrap())
            }
            2 => Tensor::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => Tensor::Bytes(bytes.to_vec()),
        })
    }

    pub fn as_f32(&self) -> Option<&Array2<f32>> {
        match self {
            Tensor::F32(a) => Some(a),
            _ => None,
        }
    }
}

/// Tensors keyed by name, ordered so serialization is byte-stable.
#[derive(Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_owned(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut manifest = Vec::new();
        for (name, t) in &self.tensors {
            let offset = data.len() as u64;
            manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
            manifest.extend_from_slice(name.as_bytes());
            manifest.push(t.dtype_code());
            let (r, c) = t.shape();
            manifest.extend_from_slice(&r.to_le_bytes());
            manifest.extend_from_slice(&c.to_le_bytes());
            manifest.extend_from_slice(&offset.to_le_bytes());
            t.write_data(&mut data);
        }
        let mut out = Vec::with_capacity(4 + 8 + manifest.len() + data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 12 + 32 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut at = 12;
        let mut entries = Vec::with_capacity(count);
        let read =
            |at: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
                if *at + n > body.len() {
                    return Err(CheckpointError::Corrupt("manifest overruns file".into()));
                }
                let s = &body[*at..*at + n];
                *at += n;
                Ok(s)
            };
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(read(&mut at, name_len)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let dtype = read(&mut at, 1)?[0];
            let rows = u32::from_le_bytes(read(&mut at, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(read(&mut at, 4)?.try_into().unwrap()) as usize;
            let offset = u64::from_le_bytes(read(&mut at, 8)?.try_into().unwrap()) as usize;
            entries.push((name, dtype, rows, cols, offset));
        }
        let data = &body[at..];
        let mut tensors = BTreeMap::new();
        for (name, dtype, rows, cols, offset) in entries {
            if offset > data.len() {
                return Err(CheckpointError::ChecksumMismatch);
            }
            let t = Tensor::read_data(dtype, rows, cols, &data[offset..])?;
            tensors.insert(name, t);
        }
        Ok(Container { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Container::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("param/w", Tensor::F32(arr2(&[[1.5f32, -2.25], [0.0, 3.125]])));
        c.insert("stats/hist", Tensor::F64(arr2(&[[0.25f64, 1.0e-17]])));
        c.insert("opt/step", Tensor::U64(vec![42]));
        c.insert("rng/seed", Tensor::Bytes(vec![7; 32]));
        c
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c, back);
        // byte-stable serialization
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.cloc");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Container::load(&path).unwrap(), c);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 33, 20] {
            match Container::from_bytes(&bytes[..cut]) {
                Err(CheckpointError::ChecksumMismatch) => {}
                other => panic!("cut {cut}: expected ChecksumMismatch, got {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_bit_is_a_checksum_error() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(b"NOPE"),
            Err(CheckpointError::BadMagic)
        ));
        // the version gate fires before the digest is even computed
        bytes[4] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(CheckpointError::VersionMismatch { found: 9 })
        ));
    }
}
