//! BMFT feature files and the in-memory feature store.
//!
//! Layout, all little-endian:
//!   magic  4 bytes  "BMFT"
//!   version 1 byte  0x01
//!   rows   u32
//!   dim    u32
//!   data   rows*dim f32, row-major
//!
//! 32-bit on disk, widened to f64 in memory. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BMFT";
pub const VERSION: u8 = 1;

/// A rows x dim feature matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * dim, "feature data length mismatch");
        FeatureMatrix { rows, dim, data }
    }

    pub fn widened(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_features(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + matrix.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    for v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    if bytes.len() < 13 {
        return Err(Error::format(path, "file shorter than the 13-byte header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:02x?}, expected {MAGIC:02x?}", &bytes[0..4]),
        ));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {}, expected {VERSION}", bytes[4]),
        ));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = 13 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes but header declares {rows}x{dim} ({} bytes)",
                bytes.len() - 13,
                rows * dim * 4
            ),
        ));
    }
    let data = bytes[13..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix { rows, dim, data })
}

/// Feature matrices keyed by id (video id or query id).
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    matrices: BTreeMap<String, FeatureMatrix>,
}

impl FeatureStore {
    pub fn new() -> Self {
        FeatureStore::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, matrix: FeatureMatrix) {
        self.matrices.insert(id.into(), matrix);
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMatrix> {
        self.matrices.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.matrices.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Write every matrix as `<dir>/<id>.bmft`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, m) in &self.matrices {
            write_features(&dir.join(format!("{id}.bmft")), m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bmft");
        let m = FeatureMatrix::new(3, 4, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect());
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_row_matrix_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bmft");
        let m = FeatureMatrix::new(0, 8, vec![]);
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.rows, 0);
        assert_eq!(back.dim, 8);
        assert!(back.data.is_empty());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bmft");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.bmft");
        std::fs::write(&path, b"BMFT\x09\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn declared_size_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bmft");
        // Header says 2x2 (16 payload bytes) but only 8 follow.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"BMFT\x01");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("header declares"), "{err}");
    }

    #[test]
    fn truncated_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.bmft");
        std::fs::write(&path, b"BMFT").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(err.to_string().contains("shorter than"), "{err}");
    }
}
