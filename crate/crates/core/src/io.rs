//! On-disk binary formats.
//!
//! Two containers are defined here:
//!
//! * A single-array container (`ARR1`): magic, dtype tag, shape header,
//!   then raw little-endian data. EEG trials and embeddings are stored as
//!   32-bit floats; labels as 64-bit signed integers; checkpoint parameters
//!   as 64-bit floats. The format is bit-exact: writing the same array twice
//!   produces identical bytes.
//! * A named-array archive (`MARC`) used by checkpoints: a JSON metadata
//!   blob followed by a sequence of named `ARR1`-style arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const ARRAY_MAGIC: &[u8; 4] = b"ARR1";
const ARCHIVE_MAGIC: &[u8; 8] = b"MUSEARC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I64 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::I64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> Result<()> {
    w.write_all(ARRAY_MAGIC)?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(DType, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(Error::Format("bad array magic".into()));
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let dtype = DType::from_tag(tags[0])?;
    let ndim = tags[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    Ok((dtype, shape))
}

/// Write an f64 array as 32-bit floats (the data interchange format).
pub fn write_array_f32<W: Write>(w: &mut W, arr: &ArrayD<f64>) -> Result<()> {
    write_header(w, DType::F32, arr.shape())?;
    for &v in arr.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Write an f64 array at full precision (checkpoints).
pub fn write_array_f64<W: Write>(w: &mut W, arr: &ArrayD<f64>) -> Result<()> {
    write_header(w, DType::F64, arr.shape())?;
    for &v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_array_i64<W: Write>(w: &mut W, arr: &ArrayD<i64>) -> Result<()> {
    write_header(w, DType::I64, arr.shape())?;
    for &v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read any float array, widening f32 to f64. Rejects integer payloads.
pub fn read_array_f64<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let (dtype, shape) = read_header(r)?;
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            for c in buf.chunks_exact(4) {
                out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        DType::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            for c in buf.chunks_exact(8) {
                out.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        DType::I64 => return Err(Error::Format("expected float array, found i64".into())),
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out)
        .map_err(|e| Error::Format(format!("array shape error: {e}")))
}

pub fn read_array_i64<R: Read>(r: &mut R) -> Result<ArrayD<i64>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != DType::I64 {
        return Err(Error::Format("expected i64 array".into()));
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let out: Vec<i64> = buf
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), out)
        .map_err(|e| Error::Format(format!("array shape error: {e}")))
}

pub fn save_array_f32(path: impl AsRef<Path>, arr: &ArrayD<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io_at(&path, e))?);
    write_array_f32(&mut w, arr)
}

pub fn save_array_i64(path: impl AsRef<Path>, arr: &ArrayD<i64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io_at(&path, e))?);
    write_array_i64(&mut w, arr)
}

pub fn load_array_f64(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let mut r = BufReader::new(File::open(&path).map_err(|e| Error::io_at(&path, e))?);
    read_array_f64(&mut r)
}

pub fn load_array_i64(path: impl AsRef<Path>) -> Result<ArrayD<i64>> {
    let mut r = BufReader::new(File::open(&path).map_err(|e| Error::io_at(&path, e))?);
    read_array_i64(&mut r)
}

/// A named-array archive: JSON metadata plus ordered named f64 arrays.
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Archive {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io_at(&path, e))?);
        w.write_all(ARCHIVE_MAGIC)?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.arrays {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            write_array_f64(&mut w, arr)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(&path).map_err(|e| Error::io_at(&path, e))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let meta_len = u32::from_le_bytes(len4) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta = serde_json::from_slice(&meta_buf).map_err(|e| Error::Format(e.to_string()))?;
        r.read_exact(&mut len4)?;
        let n_arrays = u32::from_le_bytes(len4) as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2)?;
            let name_len = u16::from_le_bytes(len2) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|e| Error::Format(e.to_string()))?;
            let arr = read_array_f64(&mut r)?;
            arrays.push((name, arr));
        }
        Ok(Archive { meta, arrays })
    }
}

/// SHA-256 of a file's contents, hex encoded.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut f = File::open(&path).map_err(|e| Error::io_at(&path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn f32_roundtrip_is_bit_exact() {
        let arr = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.25, 0.0, 3.0, 4.5, -0.125])
            .unwrap();
        let mut buf = Vec::new();
        write_array_f32(&mut buf, &arr).unwrap();
        let back = read_array_f64(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_array_f32(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back, arr); // values chosen f32-exact
    }

    #[test]
    fn f64_roundtrip_preserves_bits() {
        let vals = vec![std::f64::consts::PI, 1.0 / 3.0, -1e-300, 7.0];
        let arr = ArrayD::from_shape_vec(IxDyn(&[4]), vals.clone()).unwrap();
        let mut buf = Vec::new();
        write_array_f64(&mut buf, &arr).unwrap();
        let back = read_array_f64(&mut buf.as_slice()).unwrap();
        for (a, b) in back.iter().zip(vals.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arc.bin");
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let arc = Archive {
            meta: serde_json::json!({"version": 1, "note": "x"}),
            arrays: vec![("w".into(), a.clone())],
        };
        arc.save(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        assert_eq!(back.meta["version"], 1);
        assert_eq!(back.arrays.len(), 1);
        assert_eq!(back.arrays[0].0, "w");
        assert_eq!(back.arrays[0].1, a);
    }

    #[test]
    fn integer_payload_rejected_as_float() {
        let arr = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1i64, 2]).unwrap();
        let mut buf = Vec::new();
        write_array_i64(&mut buf, &arr).unwrap();
        assert!(read_array_f64(&mut buf.as_slice()).is_err());
    }
}
