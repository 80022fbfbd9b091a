//! VOL1 container: little-endian `"VOL1"`, dtype `u8` (1 = f32 scalar,
//! 2 = u8 label), three zero bytes, `nx ny nz` as `u32`, then the payload in
//! x-fastest order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Label, LabelMask, Volume};

pub const MAGIC: &[u8; 4] = b"VOL1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_LABEL: u8 = 2;
const HEADER_LEN: usize = 20;

fn header(dtype: u8, dims: Dims) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + dims.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.extend_from_slice(&[0, 0, 0]);
    for d in dims.as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

/// Parses the header and returns `(dtype, dims, payload)`.
fn parse_header(bytes: &[u8]) -> Result<(u8, Dims, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 && dtype != DTYPE_LABEL {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let dim =
        |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2));
    if dims.is_empty() {
        return Err(Error::Format(format!("zero-sized grid {dims}")));
    }
    Ok((dtype, dims, &bytes[HEADER_LEN..]))
}

fn check_payload(payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(())
}

/// Voxels are narrowed to `f32` on disk.
pub fn volume_to_bytes(v: &Volume) -> Vec<u8> {
    let mut out = header(DTYPE_F32, v.dims());
    for &x in v.voxels() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume> {
    let (dtype, dims, payload) = parse_header(bytes)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "expected scalar dtype {DTYPE_F32}, got {dtype}"
        )));
    }
    check_payload(payload, dims.len() * 4)?;
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Volume::raw(dims, voxels)
}

pub fn mask_to_bytes(m: &LabelMask) -> Vec<u8> {
    let mut out = header(DTYPE_LABEL, m.dims());
    out.extend(m.labels().iter().map(|&l| l as u8));
    out
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<LabelMask> {
    let (dtype, dims, payload) = parse_header(bytes)?;
    if dtype != DTYPE_LABEL {
        return Err(Error::Format(format!(
            "expected label dtype {DTYPE_LABEL}, got {dtype}"
        )));
    }
    check_payload(payload, dims.len())?;
    let labels = payload
        .iter()
        .map(|&b| Label::from_code(b).ok_or_else(|| Error::Format(format!("invalid label {b}"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMask::new(dims, labels)
}

pub fn read_vol(path: impl AsRef<Path>) -> Result<Volume> {
    volume_from_bytes(&fs::read(path)?)
}

pub fn write_vol(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    Ok(fs::write(path, volume_to_bytes(v))?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    mask_from_bytes(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &LabelMask) -> Result<()> {
    Ok(fs::write(path, mask_to_bytes(m))?)
}
