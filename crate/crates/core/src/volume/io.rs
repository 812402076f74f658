//! `VOL1` binary volumes.
//!
//! Bytes 0-3 hold the magic `VOL1`; bytes 4-27 hold `nx, ny, nz` as `u32`
//! and `sx, sy, sz` as `f32`; byte 28 is the modality tag; bytes 29-31 are
//! zero; the payload is `nx * ny * nz` `f32` values, x fastest. Everything is
//! little-endian.

use super::{Modality, Volume};
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VOL1";
const HEADER: usize = 32;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * v.len());
    out.extend_from_slice(MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(v.modality().tag());
    out.extend_from_slice(&[0, 0, 0]);
    for &x in v.voxels() {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing VOL1 magic".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::Format(format!("header truncated at {} bytes", bytes.len())));
    }
    let word = |i: usize| -> [u8; 4] { bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes") };
    let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    let modality = Modality::from_tag(bytes[28])?;
    if bytes[29..32] != [0, 0, 0] {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER..];
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(Error::Length { expected, found: payload.len() / 4 });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Volume::new(dims, spacing, voxels, modality)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}
