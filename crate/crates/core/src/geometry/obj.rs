//! Wavefront OBJ read/write: positions and faces, with vertex colors via the
//! extended `v x y z r g b` form.

use super::{GeometryError, TriMesh};
use crate::math::Vec3;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<(), GeometryError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(colors) => {
                let c = colors[i];
                writeln!(w, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2])?
            }
            None => writeln!(w, "v {} {} {}", v[0], v[1], v[2])?,
        }
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriMesh, GeometryError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| GeometryError::Parse(format!("line {}: {e}", lineno + 1)))
                    })
                    .collect::<Result<_, _>>()?;
                if nums.len() != 3 && nums.len() != 6 {
                    return Err(GeometryError::Parse(format!(
                        "line {}: vertex needs 3 or 6 components",
                        lineno + 1
                    )));
                }
                vertices.push([nums[0], nums[1], nums[2]]);
                if nums.len() == 6 {
                    colors.push([nums[3], nums[4], nums[5]]);
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        // accept v, v/vt, v//vn, v/vt/vn; only the vertex index is used
                        let head = t.split('/').next().unwrap_or(t);
                        head.parse::<i64>()
                            .map_err(|e| GeometryError::Parse(format!("line {}: {e}", lineno + 1)))
                            .and_then(|v| {
                                if v < 1 {
                                    Err(GeometryError::Parse(format!(
                                        "line {}: negative/zero face index",
                                        lineno + 1
                                    )))
                                } else {
                                    Ok((v - 1) as u32)
                                }
                            })
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(GeometryError::Parse(format!(
                        "line {}: face needs at least 3 indices",
                        lineno + 1
                    )));
                }
                for i in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    let has_colors = colors.len() == vertices.len() && !vertices.is_empty();
    let mesh = TriMesh::new(vertices, faces)?;
    Ok(if has_colors { mesh.with_colors(colors) } else { mesh })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_colors() {
        let mesh = TriMesh::box_mesh([0.0; 3], [1.0; 3]).with_colors(
            (0..8).map(|i| [i as f64 / 7.0, 0.5, 0.25]).collect(),
        );
        let dir = std::env::temp_dir().join("local4d_obj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cube.obj");
        write_obj(&mesh, &path).unwrap();
        let back = read_obj(&path).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.colors, mesh.colors);
    }
}
