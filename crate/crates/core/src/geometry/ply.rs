//! Binary little-endian PLY for oriented point clouds with properties
//! x, y, z, nx, ny, nz and optional uchar red, green, blue.

use super::{GeometryError, OrientedPointCloud};
use crate::math::Vec3;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn write_ply(cloud: &OrientedPointCloud, path: &Path) -> Result<(), GeometryError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property double {p}")?;
    }
    if cloud.colors.is_some() {
        for p in ["red", "green", "blue"] {
            writeln!(w, "property uchar {p}")?;
        }
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        for v in cloud.points[i].iter().chain(cloud.normals[i].iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(colors) = &cloud.colors {
            for c in colors[i] {
                w.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
}

impl Scalar {
    fn parse(tok: &str) -> Option<Scalar> {
        match tok {
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            "uchar" | "uint8" => Some(Scalar::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
            Scalar::U8 => 1,
        }
    }

    fn read(self, buf: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
            Scalar::U8 => buf[0] as f64 / 255.0,
        }
    }
}

pub fn read_ply(path: &Path) -> Result<OrientedPointCloud, GeometryError> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut count = 0usize;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(GeometryError::Parse("unexpected end of ply header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | ["comment", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(GeometryError::Parse(format!("unsupported ply format {fmt}")));
                }
            }
            ["element", "vertex", n] => {
                count = n
                    .parse()
                    .map_err(|e| GeometryError::Parse(format!("vertex count: {e}")))?;
            }
            ["element", other, _] => {
                return Err(GeometryError::Parse(format!("unsupported element {other}")));
            }
            ["property", ty, name] => {
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| GeometryError::Parse(format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), scalar));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut offsets = std::collections::HashMap::new();
    let mut off = 0usize;
    for (name, scalar) in &props {
        offsets.insert(name.clone(), (off, *scalar));
        off += scalar.size();
    }
    for needed in ["x", "y", "z", "nx", "ny", "nz"] {
        if !offsets.contains_key(needed) {
            return Err(GeometryError::Parse(format!("ply missing property {needed}")));
        }
    }
    let has_colors = ["red", "green", "blue"].iter().all(|c| offsets.contains_key(*c));
    let mut data = vec![0u8; stride * count];
    reader.read_exact(&mut data)?;
    let get = |row: usize, name: &str| -> f64 {
        let (o, s) = offsets[name];
        s.read(&data[row * stride + o..])
    };
    let mut points: Vec<Vec3> = Vec::with_capacity(count);
    let mut normals: Vec<Vec3> = Vec::with_capacity(count);
    let mut colors: Vec<[f64; 3]> = Vec::new();
    for row in 0..count {
        points.push([get(row, "x"), get(row, "y"), get(row, "z")]);
        normals.push([get(row, "nx"), get(row, "ny"), get(row, "nz")]);
        if has_colors {
            colors.push([get(row, "red"), get(row, "green"), get(row, "blue")]);
        }
    }
    let cloud = OrientedPointCloud::new(points, normals)?;
    Ok(if has_colors { cloud.with_colors(colors) } else { cloud })
}
