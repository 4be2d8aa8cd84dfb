//! Template binary format and parameter JSON.
//!
//! Template layout (all little-endian):
//!   bytes 0..8   magic "LORDBODY"
//!   u32          version (1)
//!   u32 x 4      vertex count V, face count F, joint count J, shape dims B
//!   u32 x 3F     face indices
//!   i32 x J      parent indices (-1 = root)
//!   f64 x 3V     rest vertices
//!   f64 x 3J     rest joints
//!   f64 x VJ     skinning weights (row-major)
//!   f64 x 3VB    shape basis (mode-major)

use super::{BodyError, BodyParams, BodyTemplate};
use crate::geometry::TriMesh;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LORDBODY";
const VERSION: u32 = 1;

pub fn write_template(template: &BodyTemplate, path: &Path) -> Result<(), BodyError> {
    template.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let v = template.num_vertices() as u32;
    let f = template.rest_mesh.faces.len() as u32;
    let j = template.joints.len() as u32;
    let b = super::NUM_SHAPE as u32;
    for c in [v, f, j, b] {
        w.write_all(&c.to_le_bytes())?;
    }
    for face in &template.rest_mesh.faces {
        for &i in face {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    for &p in &template.parent {
        w.write_all(&p.to_le_bytes())?;
    }
    for vert in &template.rest_mesh.vertices {
        for &x in vert {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for joint in &template.joints {
        for &x in joint {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    for &x in &template.skin_weights {
        w.write_all(&x.to_le_bytes())?;
    }
    for &x in &template.shape_basis {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_template(path: &Path) -> Result<BodyTemplate, BodyError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BodyError::Parse("bad template magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32, BodyError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(BodyError::Parse(format!("unsupported template version {version}")));
    }
    let v = read_u32(&mut r)? as usize;
    let f = read_u32(&mut r)? as usize;
    let j = read_u32(&mut r)? as usize;
    let b = read_u32(&mut r)? as usize;
    if j != super::NUM_JOINTS || b != super::NUM_SHAPE {
        return Err(BodyError::Parse("template dimension mismatch".into()));
    }
    let mut faces = Vec::with_capacity(f);
    let mut buf4 = [0u8; 4];
    for _ in 0..f {
        let mut face = [0u32; 3];
        for slot in &mut face {
            r.read_exact(&mut buf4)?;
            *slot = u32::from_le_bytes(buf4);
        }
        faces.push(face);
    }
    let mut parent = Vec::with_capacity(j);
    for _ in 0..j {
        r.read_exact(&mut buf4)?;
        parent.push(i32::from_le_bytes(buf4));
    }
    let mut buf8 = [0u8; 8];
    let mut read_f64s = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f64>, BodyError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            out.push(f64::from_le_bytes(buf8));
        }
        Ok(out)
    };
    let verts_flat = read_f64s(&mut r, 3 * v)?;
    let joints_flat = read_f64s(&mut r, 3 * j)?;
    let skin_weights = read_f64s(&mut r, v * j)?;
    let shape_basis = read_f64s(&mut r, 3 * v * b)?;
    let vertices: Vec<[f64; 3]> = verts_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let joints: Vec<[f64; 3]> = joints_flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let template = BodyTemplate {
        rest_mesh: TriMesh::new(vertices, faces)?,
        joints,
        subtree_mask: BodyTemplate::compute_subtree_masks(&parent),
        parent,
        skin_weights,
        shape_basis,
    };
    template.validate()?;
    Ok(template)
}

pub fn write_params(params: &BodyParams, path: &Path) -> Result<(), BodyError> {
    params.validate()?;
    let json = serde_json::to_string_pretty(params).expect("params serialize");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<BodyParams, BodyError> {
    let text = std::fs::read_to_string(path)?;
    let params: BodyParams =
        serde_json::from_str(&text).map_err(|e| BodyError::Parse(e.to_string()))?;
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{build_template, BodyPreset};

    #[test]
    fn template_round_trip_is_bit_exact() {
        let t = build_template(BodyPreset::Desk, 5);
        let dir = std::env::temp_dir().join("local4d_body_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.l4db");
        write_template(&t, &path).unwrap();
        let back = read_template(&path).unwrap();
        assert_eq!(back.rest_mesh.vertices, t.rest_mesh.vertices);
        assert_eq!(back.rest_mesh.faces, t.rest_mesh.faces);
        assert_eq!(back.joints, t.joints);
        assert_eq!(back.parent, t.parent);
        assert_eq!(back.skin_weights, t.skin_weights);
        assert_eq!(back.shape_basis, t.shape_basis);
    }

    #[test]
    fn params_round_trip() {
        let mut p = BodyParams::rest(4);
        p.shape[2] = 0.5;
        p.poses[1][7] = -0.25;
        p.translations[3] = [0.1, 0.2, 0.3];
        let dir = std::env::temp_dir().join("local4d_body_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.json");
        write_params(&p, &path).unwrap();
        assert_eq!(read_params(&path).unwrap(), p);
    }
}
