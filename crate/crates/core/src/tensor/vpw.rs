//! `VPW1` weight files.
//!
//! Layout (all integers little-endian): magic `VPW1`, `u32` tensor count, then
//! per tensor a `u16` name length, UTF-8 name, `u8` rank, `rank × u32`
//! extents and the row-major `f32` payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const VPW1_MAGIC: [u8; 4] = *b"VPW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn io_err(e: std::io::Error) -> Error {
    Error::format("VPW1 stream", e)
}

pub fn write_vpw1(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::format("VPW1", "too many tensors"))?;
    w.write_all(&VPW1_MAGIC).map_err(io_err)?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format("VPW1", "name too long"))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::format("VPW1", "rank too large"))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::format(
                "VPW1",
                format!("{:?}: shape does not match data", t.name),
            ));
        }
        w.write_all(&len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[rank]).map_err(io_err)?;
        for &e in &t.shape {
            let e = u32::try_from(e).map_err(|_| Error::format("VPW1", "extent too large"))?;
            w.write_all(&e.to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(4 * t.data.len());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

pub fn read_vpw1(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    if read_exact::<4>(r)? != VPW1_MAGIC {
        return Err(Error::format("VPW1", "bad magic"));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| Error::format("VPW1 name", e))?;
        let rank = read_exact::<1>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::format("VPW1", "trailing bytes after last tensor"));
    }
    Ok(out)
}
