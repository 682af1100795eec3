//! Little-endian primitives shared by the binary file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Upper bound on the element count of any array read from disk.
pub const MAX_ELEMENTS: usize = 1 << 28;

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> io::Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn truncated(what: &str, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated file while reading {what}"))
    } else {
        Error::Format(format!("read error in {what}: {e}"))
    }
}

pub fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| truncated(what, e))
}

pub fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    if n > MAX_ELEMENTS {
        return Err(Error::Format(format!("{what}: {n} elements exceeds limit")));
    }
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Product of extents, rejecting overflow and sizes past [`MAX_ELEMENTS`].
pub fn checked_count(extents: &[usize], what: &str) -> Result<usize> {
    let mut n: usize = 1;
    for &e in extents {
        n = n
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("{what}: dimensions {extents:?} overflow")))?;
    }
    Ok(n)
}

/// True when the reader has no more bytes.
pub fn at_eof<R: io::BufRead>(r: &mut R) -> Result<bool> {
    r.fill_buf()
        .map(|b| b.is_empty())
        .map_err(|e| Error::Format(format!("read error: {e}")))
}
