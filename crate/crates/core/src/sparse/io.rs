//! Point cloud file formats.
//!
//! Binary format (little-endian): header `N: u32, I: u32`, body `N x (3+I)`
//! 32-bit floats per point (x, y, z, then I feature values).
//!
//! ASCII PLY is read for interchange: the `vertex` element's `x/y/z` float
//! properties become positions and any further float properties become
//! features, in declaration order.

use crate::geometry::{PointCloud, Vec3};
use crate::{Error, Result};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub fn write_cloud_binary(path: &Path, pc: &PointCloud) -> Result<()> {
    let display = path.display().to_string();
    let mut buf: Vec<u8> = Vec::with_capacity(8 + pc.len() * (3 + pc.feature_dim) * 4);
    buf.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(pc.feature_dim as u32).to_le_bytes());
    for (i, p) in pc.positions.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if pc.feature_dim > 0 {
            for &v in pc.feature_row(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(display, e))
}

pub fn read_cloud_binary(path: &Path) -> Result<PointCloud> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(&display, "missing 8-byte header"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let feature_dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + n * (3 + feature_dim) * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &display,
            format!(
                "size {} does not match header (N={n}, I={feature_dim} wants {expected})",
                bytes.len()
            ),
        ));
    }
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * feature_dim);
    let mut off = 8;
    let mut take = || {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        off += 4;
        v
    };
    for _ in 0..n {
        let (x, y, z) = (take(), take(), take());
        positions.push(Vec3::new(x, y, z));
        for _ in 0..feature_dim {
            features.push(take());
        }
    }
    PointCloud::new(positions, features, feature_dim)
}

pub fn read_cloud_ply(path: &Path) -> Result<PointCloud> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut lines = BufReader::new(file).lines();

    let mut next_line = || -> Result<String> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::io(&display, e))?
            .ok_or_else(|| Error::format(&display, "unexpected end of file"))
    };

    if next_line()?.trim() != "ply" {
        return Err(Error::format(&display, "missing 'ply' magic line"));
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    loop {
        let line = next_line()?;
        let line = line.trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("comment") => continue,
            Some("format") => {
                if tokens.next() != Some("ascii") {
                    return Err(Error::format(&display, "only ascii PLY is supported"));
                }
            }
            Some("element") => {
                let kind = tokens.next().unwrap_or("");
                in_vertex_element = kind == "vertex";
                if in_vertex_element {
                    let count = tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::format(&display, "bad vertex count"))?;
                    vertex_count = Some(count);
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let ty = tokens.next().unwrap_or("");
                    if ty == "list" {
                        return Err(Error::format(&display, "list property on vertex element"));
                    }
                    let name = tokens
                        .next()
                        .ok_or_else(|| Error::format(&display, "property without a name"))?;
                    properties.push(name.to_string());
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::format(&display, format!("unknown header line '{other}'")))
            }
            None => continue,
        }
    }

    let n = vertex_count.ok_or_else(|| Error::format(&display, "no vertex element"))?;
    let xyz: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            properties
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| Error::format(&display, format!("missing '{axis}' property")))
        })
        .collect::<Result<_>>()?;
    let extra: Vec<usize> = (0..properties.len()).filter(|i| !xyz.contains(i)).collect();

    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * extra.len());
    for row in 0..n {
        let line = next_line()?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(&display, format!("bad number on vertex row {row}")))?;
        if values.len() != properties.len() {
            return Err(Error::format(
                &display,
                format!(
                    "vertex row {row}: {} values for {} properties",
                    values.len(),
                    properties.len()
                ),
            ));
        }
        positions.push(Vec3::new(values[xyz[0]], values[xyz[1]], values[xyz[2]]));
        for &e in &extra {
            features.push(values[e]);
        }
    }
    PointCloud::new(positions, features, extra.len())
}
