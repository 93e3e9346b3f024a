//! Little-endian binary IO helpers shared by the checkpoint, index and
//! feature-file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32_slice(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for &v in vs {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn fill(r: &mut impl Read, buf: &mut [u8], context: &'static str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                context,
                detail: format!("while reading {}", what),
            }
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_u32(r: &mut impl Read, context: &'static str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, context, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read, context: &'static str, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, context, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f32(r: &mut impl Read, context: &'static str, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    fill(r, &mut b, context, what)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read, context: &'static str, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, context, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads `count` f32 values, widening to f64.
pub fn read_f32_vec(r: &mut impl Read, count: usize, context: &'static str, what: &str) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    fill(r, &mut buf, context, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn read_bytes(r: &mut impl Read, count: usize, context: &'static str, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; count];
    fill(r, &mut buf, context, what)?;
    Ok(buf)
}

/// Checks a 4-byte magic and a version number, with distinct errors for a
/// wrong file type versus a wrong version.
pub fn expect_header(
    r: &mut impl Read,
    context: &'static str,
    magic: &[u8; 4],
    version: u32,
) -> Result<()> {
    let mut found = [0u8; 4];
    fill(r, &mut found, context, "magic")?;
    if &found != magic {
        return Err(Error::BadMagic {
            context,
            expected: *magic,
            found,
        });
    }
    let v = read_u32(r, context, "version")?;
    if v != version {
        return Err(Error::VersionMismatch {
            context,
            expected: version,
            found: v,
        });
    }
    Ok(())
}
