//! 8-bit binary PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn format_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Encodes row-major `[0, 1]` values (clamped) as a P5 image.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dim("pgm_bytes", &[height, width], &[values.len()]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn pgm_write(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = pgm_bytes(width, height, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decoded image: `(width, height, values in [0, 1])`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 0;
    let mut token = |field: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(field, "missing (truncated header)"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P5" {
        return Err(format_err("magic", format!("`{magic}`, expected P5")));
    }
    let num = |s: String, field: &str| -> Result<usize> {
        s.parse().map_err(|_| format_err(field, format!("`{s}` is not a number")))
    };
    let width = num(token("width")?, "width")?;
    let height = num(token("height")?, "height")?;
    let maxval = num(token("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(format_err("maxval", format!("{maxval}, expected 255")));
    }
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(format_err(
            "raster",
            format!("needs {need} bytes, found {}", bytes.len().saturating_sub(start)),
        ));
    }
    let values = bytes[start..start + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((width, height, values))
}

pub fn pgm_read(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}
