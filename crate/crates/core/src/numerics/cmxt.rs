//! `CMXT` v1 tensor container.
//!
//! Layout: magic `CMXT`, version byte `1`, rank byte `r` (1–4), `r`
//! little-endian `u32` extents, then the `f32` values little-endian in
//! row-major order. A file may hold several records back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMXT";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

/// Decodes one record from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format(format!("truncated at byte {at}")))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = take(4, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = take(5, 1)?[0] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} outside 1..=4")));
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = take(pos, 4)?;
        shape.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let raw = take(pos, 4 * n)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    pos += 4 * n;
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, pos))
}

/// Decodes every record in `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = decode(&bytes[pos..])?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

pub fn read<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after record",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn save_all(path: impl AsRef<Path>, ts: &[&Tensor<f32>]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = ts.iter().flat_map(|t| encode(t)).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read(&mut bytes.as_slice())
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Tensor<f32>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_all(&bytes)
}
