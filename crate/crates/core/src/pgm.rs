//! Portable graymap (P2/P5) reading and writing.
//!
//! Graymaps are the only image format the engine touches: zero-dependency,
//! byte-exact, and diffable in tests. Map values in [0, 1] are written with
//! `gray = round(255 * value)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major pixel values in `0..=maxval`.
    pub pixels: Vec<u16>,
}

impl Graymap {
    /// Pixel scaled to [0, 1].
    pub fn normalized(&self, idx: usize) -> f64 {
        self.pixels[idx] as f64 / self.maxval as f64
    }
}

/// Writes `values` (each in [0, 1]) as a graymap with `gray = round(255*v)`.
/// `binary` selects P5 over P2.
pub fn write_map<T: Scalar, P: AsRef<Path>>(
    path: P,
    width: usize,
    height: usize,
    values: &[T],
    binary: bool,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::DataLength {
            shape: vec![height, width],
            expected: width * height,
            got: values.len(),
        });
    }
    let grays: Vec<u8> = values
        .iter()
        .map(|&v| {
            let v = v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            (255.0 * v).round() as u8
        })
        .collect();
    write_gray8(path, width, height, &grays, binary)
}

/// Writes raw 8-bit grays as P5 (binary) or P2 (text).
pub fn write_gray8<P: AsRef<Path>>(
    path: P,
    width: usize,
    height: usize,
    grays: &[u8],
    binary: bool,
) -> Result<()> {
    let mut out = Vec::with_capacity(grays.len() + 32);
    if binary {
        write!(out, "P5\n{width} {height}\n255\n")?;
        out.extend_from_slice(grays);
    } else {
        write!(out, "P2\n{width} {height}\n255\n")?;
        for (i, g) in grays.iter().enumerate() {
            let sep = if (i + 1) % width == 0 { '\n' } else { ' ' };
            write!(out, "{g}{sep}")?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a P2 or P5 graymap.
pub fn read<P: AsRef<Path>>(path: P) -> Result<Graymap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::PgmFormat {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };

    let magic = bytes.get(..2).ok_or_else(|| fail("truncated header"))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(fail("not a P2/P5 graymap")),
    };

    // header tokens: width, height, maxval; '#' starts a comment line
    let mut pos = 2;
    let mut header = [0usize; 3];
    let mut found = 0;
    while found < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("malformed header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("bad header"))?;
        header[found] = token.parse().map_err(|_| fail("bad header number"))?;
        found += 1;
    }
    let (width, height, maxval) = (header[0], header[1], header[2]);
    if width == 0 || height == 0 {
        return Err(fail("zero dimensions"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail("maxval must be in 1..=255"));
    }

    let count = width * height;
    let pixels: Vec<u16> = if binary {
        pos += 1; // single whitespace byte after maxval
        let raster = bytes
            .get(pos..pos + count)
            .ok_or_else(|| fail("truncated raster"))?;
        raster.iter().map(|&b| b as u16).collect()
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| fail("bad raster"))?;
        let vals: Vec<u16> = text
            .split_ascii_whitespace()
            .map(|t| t.parse::<u16>().map_err(|_| fail("bad raster value")))
            .collect::<Result<_>>()?;
        if vals.len() != count {
            return Err(fail("raster size mismatch"));
        }
        vals
    };
    if pixels.iter().any(|&p| p > maxval as u16) {
        return Err(fail("pixel exceeds maxval"));
    }
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}
