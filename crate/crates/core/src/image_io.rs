//! Binary PPM (`P6`) and PGM (`P5`) images, 8 bits per sample.

use std::io::{BufRead, Write};

use crate::error::{CoreError, Result};

pub fn write_pgm<W: Write>(out: &mut W, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CoreError::Format(format!("{} pixels for a {width}×{height} PGM", pixels.len())));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

/// `rgb` is interleaved, row-major.
pub fn write_ppm<W: Write>(out: &mut W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(CoreError::Format(format!("{} samples for a {width}×{height} PPM", rgb.len())));
    }
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| CoreError::Format("non-ascii header".into()))
}

fn read_netpbm<R: BufRead>(r: &mut R, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let m = header_token(r)?;
    if m != magic {
        return Err(CoreError::Format(format!("expected {magic}, found {m:?}")));
    }
    let mut num = || -> Result<usize> {
        header_token(r)?
            .parse()
            .map_err(|_| CoreError::Format("bad header number".into()))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(CoreError::Format(format!("only 8-bit images supported, maxval {max}")));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data)?;
    Ok((w, h, data))
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(r, "P5", 1)
}

/// Returns `(width, height, interleaved rgb)`.
pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(r, "P6", 3)
}
