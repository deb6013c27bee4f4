//! Binary container for a single field tensor.
//!
//! Layout: `CDF1` magic, `u32` version, `u8` dtype tag, `u8` rank, zero
//! padding to 16 bytes, `rank` x `u64` extents, then the little-endian
//! row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};

const MAGIC: &[u8; 4] = b"CDF1";
const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode_field<T: Real>(field: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * field.ndim() + field.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(field.ndim() as u8);
    out.resize(HEADER, 0);
    for &e in field.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in field.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_field<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |msg: String| Error::Data(format!("field file: {msg}"));
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(bytes[8]).ok_or_else(|| bad(format!("unknown dtype {}", bytes[8])))?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored as {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let ndim = bytes[9] as usize;
    let dims_end = HEADER + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != n * dtype.size() {
        return Err(bad(format!(
            "header {shape:?} implies {} payload bytes, found {}",
            n * dtype.size(),
            payload.len()
        )));
    }
    let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
    Tensor::new(&shape, data)
}

pub fn write_field<T: Real>(path: &Path, field: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}

pub fn read_field<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
