//! Binary volume files.
//!
//! Layout (little endian): 8-byte magic `SPUQVOL1`, `u32` dtype code
//! (1 = f32 intensities, 2 = u8 labels), `u32` height, width and depth, three
//! `f32` spacings in mm, then the voxels in x-fastest order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Grid3, MaskVolume, Volume3D};

pub const VOLUME_MAGIC: &[u8; 8] = b"SPUQVOL1";
const HEADER_LEN: usize = 36;
const DTYPE_F32: u32 = 1;
const DTYPE_U8: u32 = 2;

fn header(code: u32, dims: Dims, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(VOLUME_MAGIC);
    for v in [code, dims.height as u32, dims.width as u32, dims.depth as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn write(path: &Path, mut bytes: Vec<u8>, payload: impl Iterator<Item = u8>) -> Result<()> {
    bytes.extend(payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume3D) -> Result<()> {
    let path = path.as_ref();
    let head = header(DTYPE_F32, v.dims(), v.spacing());
    write(path, head, v.data().iter().flat_map(|x| x.to_le_bytes()))
}

pub fn write_mask(path: impl AsRef<Path>, m: &MaskVolume) -> Result<()> {
    let path = path.as_ref();
    let head = header(DTYPE_U8, m.dims(), m.spacing());
    write(path, head, m.data().iter().copied())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses and checks the header, returning dims, spacing and the payload.
fn read_raw(path: &Path, want: u32) -> Result<(Dims, [f32; 3], Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.into(), expected: HEADER_LEN, found: bytes.len() });
    }
    let code = u32_at(&bytes, 8);
    if code != want {
        return Err(Error::BadDtype { path: path.into(), code });
    }
    let dims = Dims::new(u32_at(&bytes, 12) as usize, u32_at(&bytes, 16) as usize, u32_at(&bytes, 20) as usize);
    let spacing = [0, 1, 2].map(|i| f32::from_le_bytes(bytes[24 + 4 * i..28 + 4 * i].try_into().unwrap()));
    let size = if code == DTYPE_F32 { 4 } else { 1 };
    let expected = dims.len() * size;
    let found = bytes.len() - HEADER_LEN;
    if found < expected {
        return Err(Error::Truncated { path: path.into(), expected, found });
    }
    if found > expected {
        return Err(Error::InvalidArgument(format!("{}: {} trailing bytes", path.display(), found - expected)));
    }
    Ok((dims, spacing, bytes[HEADER_LEN..].to_vec()))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (dims, spacing, payload) = read_raw(path.as_ref(), DTYPE_F32)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Grid3::new(dims, spacing, data)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let (dims, spacing, payload) = read_raw(path.as_ref(), DTYPE_U8)?;
    Grid3::new(dims, spacing, payload)
}
