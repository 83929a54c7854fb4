//! PFM depth maps and binary PLY point clouds.
//!
//! PFM: `Pf\n{width} {height}\n-1.0\n` followed by little-endian `f32`
//! samples, rows stored bottom-to-top.
//!
//! PLY: `binary_little_endian 1.0` with one `vertex` element holding
//! `float x, y, z` (meters), `uchar red, green, blue`, `float confidence`
//! and `ushort source_view`, 21 bytes per vertex.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::lift::PointCloud;
use crate::raster::Grid;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {format} data: {message}")]
    Malformed {
        format: &'static str,
        message: String,
    },
}

fn malformed(format: &'static str, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        format,
        message: message.into(),
    }
}

/// Encodes a single-channel float map. Values are narrowed to `f32`.
pub fn encode_pfm(map: &Grid<f64>) -> Vec<u8> {
    let (w, h) = map.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*map.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Grid<f64>, FormatError> {
    let mut reader = BufReader::new(bytes);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(malformed("pfm", "truncated header"));
        }
        header.push(line.trim().to_string());
    }
    if header[0] != "Pf" {
        return Err(malformed("pfm", format!("unsupported magic {:?}", header[0])));
    }
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| malformed("pfm", "bad dimensions")))
        .collect::<Result<_, _>>()?;
    let [w, h] = dims[..] else {
        return Err(malformed("pfm", "bad dimensions"));
    };
    let scale: f64 = header[2]
        .parse()
        .map_err(|_| malformed("pfm", "bad scale"))?;
    let little = scale < 0.0;
    let mut data = vec![0.0f64; w * h];
    let mut buf = [0u8; 4];
    for y in (0..h).rev() {
        for x in 0..w {
            reader
                .read_exact(&mut buf)
                .map_err(|_| malformed("pfm", "truncated samples"))?;
            let v = if little {
                f32::from_le_bytes(buf)
            } else {
                f32::from_be_bytes(buf)
            };
            data[y * w + x] = v as f64;
        }
    }
    Ok(Grid::from_vec(w, h, data))
}

pub fn write_pfm(path: &Path, map: &Grid<f64>) -> Result<(), FormatError> {
    std::fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Grid<f64>, FormatError> {
    decode_pfm(&std::fs::read(path)?)
}

const PLY_HEADER_PROPS: &str = "property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property float confidence
property ushort source_view
";

pub fn encode_ply(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(256 + pc.len() * 21);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{}end_header\n",
        pc.len(),
        PLY_HEADER_PROPS
    )
    .expect("write to vec");
    for i in 0..pc.len() {
        let p = pc.positions[i];
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for c in pc.colors[i] {
            out.push(c.round().clamp(0.0, 255.0) as u8);
        }
        out.extend_from_slice(&pc.confidence[i].to_le_bytes());
        out.extend_from_slice(&pc.source_view[i].to_le_bytes());
    }
    out
}

/// Reads clouds written by [`encode_ply`].
pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let mut reader = BufReader::new(bytes);
    let mut count = None;
    let mut props = String::new();
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(malformed("ply", "missing magic"));
    }
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(malformed("ply", "unterminated header"));
        }
        let l = line.trim();
        if l == "end_header" {
            break;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            count = Some(
                rest.parse::<usize>()
                    .map_err(|_| malformed("ply", "bad vertex count"))?,
            );
        } else if l.starts_with("format ") {
            if l != "format binary_little_endian 1.0" {
                return Err(malformed("ply", format!("unsupported {l}")));
            }
        } else if l.starts_with("property ") {
            props.push_str(l);
            props.push('\n');
        }
    }
    if props != PLY_HEADER_PROPS {
        return Err(malformed("ply", "unexpected vertex layout"));
    }
    let n = count.ok_or_else(|| malformed("ply", "no vertex element"))?;
    let mut pc = PointCloud::default();
    let mut rec = [0u8; 21];
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    for _ in 0..n {
        reader
            .read_exact(&mut rec)
            .map_err(|_| malformed("ply", "truncated vertex data"))?;
        pc.push(
            Vector3::new(f(&rec[0..4]) as f64, f(&rec[4..8]) as f64, f(&rec[8..12]) as f64),
            [rec[12] as f32, rec[13] as f32, rec[14] as f32],
            u16::from_le_bytes([rec[19], rec[20]]),
            f(&rec[15..19]),
        );
    }
    Ok(pc)
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<(), FormatError> {
    std::fs::write(path, encode_ply(pc))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud, FormatError> {
    decode_ply(&std::fs::read(path)?)
}
