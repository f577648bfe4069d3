//! Binary array files shared by the dataset, first-frame pose and prediction
//! formats.
//!
//! Layout: 16-byte header (`b"GTAR"`, dtype code, rows, cols as little-endian
//! `u32`) followed by `rows·cols` little-endian 32-bit values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub const MAGIC: &[u8; 4] = b"GTAR";
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    I32 = 2,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32le",
            DType::I32 => "i32le",
        }
    }
}

fn header(dtype: DType, rows: usize, cols: usize) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&(dtype as u32).to_le_bytes());
    h.extend_from_slice(&(rows as u32).to_le_bytes());
    h.extend_from_slice(&(cols as u32).to_le_bytes());
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `values` (row-major, `cols` per row) as f32. Values are rounded to
/// the nearest f32.
pub fn write_f32(path: &Path, values: &[f64], cols: usize) -> Result<()> {
    assert!(cols > 0 && values.len() % cols == 0);
    let mut bytes = header(DType::F32, values.len() / cols, cols);
    bytes.reserve(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn write_i32(path: &Path, values: &[i32], cols: usize) -> Result<()> {
    assert!(cols > 0 && values.len() % cols == 0);
    let mut bytes = header(DType::I32, values.len() / cols, cols);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

struct RawArray {
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
}

fn read_raw(path: &Path, expect: DType) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than the array header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let code = word(4);
    if code != expect as u32 {
        return Err(Error::format(path, format!("dtype code {code}, expected {}", expect.name())));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let need = rows * cols * 4;
    let have = bytes.len() - HEADER_LEN;
    if have != need {
        return Err(Error::format(path, format!("truncated array: {have} payload bytes, expected {need}")));
    }
    Ok(RawArray { rows, cols, payload: bytes[HEADER_LEN..].to_vec() })
}

/// Reads an f32 array, checking the column count (and row count if given).
pub fn read_f32(path: &Path, cols: usize, rows: Option<usize>) -> Result<Vec<f64>> {
    let raw = read_raw(path, DType::F32)?;
    check_shape(path, &raw, cols, rows)?;
    Ok(raw
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

pub fn read_i32(path: &Path, cols: usize, rows: Option<usize>) -> Result<Vec<i32>> {
    let raw = read_raw(path, DType::I32)?;
    check_shape(path, &raw, cols, rows)?;
    Ok(raw.payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn check_shape(path: &Path, raw: &RawArray, cols: usize, rows: Option<usize>) -> Result<()> {
    if raw.cols != cols {
        return Err(Error::format(path, format!("{} columns, expected {cols}", raw.cols)));
    }
    if let Some(r) = rows {
        if raw.rows != r {
            return Err(Error::format(path, format!("{} rows, manifest says {r}", raw.rows)));
        }
    }
    Ok(())
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    write_f32(path, &flat, 3)
}

pub fn read_points(path: &Path, rows: Option<usize>) -> Result<Vec<Vec3>> {
    let flat = read_f32(path, 3, rows)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

pub fn write_faces(path: &Path, faces: &[[u32; 3]]) -> Result<()> {
    let flat: Vec<i32> = faces.iter().flatten().map(|&i| i as i32).collect();
    write_i32(path, &flat, 3)
}

pub fn read_faces(path: &Path, rows: Option<usize>) -> Result<Vec<[u32; 3]>> {
    let flat = read_i32(path, 3, rows)?;
    flat.chunks_exact(3)
        .map(|c| {
            if c.iter().any(|&i| i < 0) {
                Err(Error::format(path, "negative face index"))
            } else {
                Ok([c[0] as u32, c[1] as u32, c[2] as u32])
            }
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

/// Reads only the `format_version` field of a manifest, so version mismatches
/// are reported before schema errors.
pub fn manifest_version(path: &Path) -> Result<u32> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
    v.get("format_version")
        .and_then(serde_json::Value::as_u64)
        .map(|v| v as u32)
        .ok_or_else(|| Error::format(path, "manifest has no format_version"))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Rounds to the nearest representable f32, so in-memory values equal what a
/// read-back produces.
#[inline]
pub fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn f32_round_points(points: &mut [Vec3]) {
    for p in points {
        *p = p.map(f32_round);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_points(&p, &[[1.0, 2.5, -3.0], [0.125, 0.0, 7.0]]).unwrap();
        assert_eq!(read_points(&p, Some(2)).unwrap()[1], [0.125, 0.0, 7.0]);
        assert!(matches!(read_points(&p, Some(3)), Err(Error::Format { .. })));
        assert!(read_faces(&p, None).is_err());

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        let err = read_points(&p, None).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        bytes[0] = b'G';
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        assert!(read_points(&p, None).unwrap_err().to_string().contains("truncated"));
    }
}
