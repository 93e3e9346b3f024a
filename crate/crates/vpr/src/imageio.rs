//! Binary PPM (P6) and PGM (P5) image files. Both formats are
//! dependency-free and bit-exact, which the determinism guarantees rely
//! on. Pixels map linearly between [0, 1] floats and 8-bit values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn byte_of(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ImageFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes an h x w x 3 tensor of [0, 1] values as a binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(format!(
            "PPM needs an hxwx3 image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| byte_of(v)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Writes an h x w slice of [0, 1] values as a binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(format!(
            "PGM {height}x{width} needs {} values, got {}",
            height * width,
            values.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| byte_of(v)).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(_) if !token.is_empty() => return Ok(token),
            Err(_) => return Err(format_err(path, "truncated header")),
        }
        let c = byte[0] as char;
        if in_comment {
            in_comment = c != '\n';
        } else if c == '#' {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !token.is_empty() {
                return Ok(token);
            }
        } else {
            token.push(c);
        }
    }
}

fn read_header(r: &mut impl Read, path: &Path, magic: &str) -> Result<(usize, usize)> {
    let found = read_token(r, path)?;
    if found != magic {
        return Err(format_err(path, format!("expected {magic}, found {found}")));
    }
    let mut dims = [0usize; 2];
    for d in &mut dims {
        *d = read_token(r, path)?
            .parse()
            .map_err(|_| format_err(path, "bad dimension"))?;
    }
    let maxval = read_token(r, path)?;
    if maxval != "255" {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    Ok((dims[0], dims[1])) // width, height
}

fn read_pixels(r: &mut impl Read, path: &Path, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count];
    r.read_exact(&mut bytes)
        .map_err(|_| format_err(path, "truncated pixel data"))?;
    Ok(bytes.into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Reads a binary PPM into an h x w x 3 tensor of [0, 1] values.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h) = read_header(&mut r, path, "P6")?;
    let data = read_pixels(&mut r, path, h * w * 3)?;
    Tensor::from_vec(&[h, w, 3], data)
}

/// Reads a binary PGM; returns (height, width, values).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (w, h) = read_header(&mut r, path, "P5")?;
    let data = read_pixels(&mut r, path, h * w)?;
    Ok((h, w, data))
}
