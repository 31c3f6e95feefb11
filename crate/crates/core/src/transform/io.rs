//! Portable grid files: an ASCII header `GRID <D> <c> <n1> .. <nD>\n`
//! followed by little-endian `f32` values, row-major, channels first.
//! `D = 0` holds a plain vector of `c` values (used for checkpoints).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::GradGrid;

pub fn serialize_grid(grid: &GradGrid) -> Vec<u8> {
    let mut header = format!("GRID {} {}", grid.spatial().len(), grid.channels());
    for n in grid.spatial() {
        header.push_str(&format!(" {n}"));
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    bytes.reserve(grid.len() * 4);
    for v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset, message: message.into() })
}

pub fn parse_grid(bytes: &[u8]) -> Result<GradGrid> {
    let Some(newline) = bytes.iter().position(|&b| b == b'\n') else {
        return format_err(bytes.len(), "missing header terminator");
    };
    let header = &bytes[..newline];
    if !header.starts_with(b"GRID") {
        return format_err(0, "expected magic `GRID`");
    }
    let mut fields = Vec::new();
    let mut pos = 4;
    while pos < header.len() {
        if header[pos] == b' ' {
            pos += 1;
            continue;
        }
        let start = pos;
        while pos < header.len() && header[pos] != b' ' {
            pos += 1;
        }
        let token = &header[start..pos];
        let value = std::str::from_utf8(token).ok().and_then(|s| s.parse::<usize>().ok());
        match value {
            Some(v) => fields.push((start, v)),
            None => return format_err(start, "expected an unsigned integer"),
        }
    }
    if fields.len() < 2 {
        return format_err(newline, "header needs a dimension and a channel count");
    }
    let (d_off, d) = fields[0];
    if fields.len() != 2 + d {
        return format_err(d_off, format!("dimension {d} does not match {} extents", fields.len() - 2));
    }
    if let Some(&(off, _)) = fields[1..].iter().find(|(_, v)| *v == 0) {
        return format_err(off, "extents must be positive");
    }
    let mut shape: Vec<usize> = vec![fields[1].1];
    shape.extend(fields[2..].iter().map(|(_, v)| *v));
    let n: usize = shape.iter().product();
    let body = &bytes[newline + 1..];
    if body.len() != n * 4 {
        let offset = newline + 1 + body.len().min(n * 4);
        return format_err(offset, format!("expected {} payload bytes, found {}", n * 4, body.len()));
    }
    let data: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return format_err(newline + 1 + 4 * i, "non-finite value");
    }
    GradGrid::new(shape, data)
}

pub fn write_grid(path: impl AsRef<Path>, grid: &GradGrid) -> Result<()> {
    fs::write(path, serialize_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GradGrid> {
    parse_grid(&fs::read(path)?)
}
