//! Core geometric primitives: triangle meshes, oriented point clouds, rigid
//! local frames, axis-aligned boxes, surface sampling and nearest-neighbor
//! queries. All quantities are meters and f64; everything here is immutable
//! after construction and safe to share across workers.

mod dist;
mod knn;
mod obj;
mod ply;

pub use dist::MeshDistanceQuery;
pub use knn::{KdTree, Neighbor};
pub use obj::{read_obj, write_obj};
pub use ply::{read_ply, write_ply};

use crate::math::{self, Mat3, Vec3};
use crate::util::DetRng;
use thiserror::Error;

/// Faces with area below this (m^2) are considered degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("face {face} is degenerate (area {area:.3e} m^2)")]
    DegenerateFace { face: usize, area: f64 },
    #[error("face {face} references vertex {index} out of range {len}")]
    IndexOutOfRange { face: usize, index: u32, len: usize },
    #[error("reference point set is empty")]
    EmptyReference,
    #[error("k = {k} exceeds reference size {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("points/normals length mismatch: {points} vs {normals}")]
    LengthMismatch { points: usize, normals: usize },
    #[error("normal {index} is not unit length (|n| = {norm})")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("matrix is not a rotation (orthonormality residual {residual:.3e})")]
    NotARotation { residual: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Indexed triangle mesh. Face indices are validated and degenerate faces are
/// rejected at construction, so downstream connectivity passes can rely on
/// well-formed topology.
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<TriMesh, GeometryError> {
        let mesh = TriMesh {
            vertices,
            faces,
            normals: None,
            colors: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Like [`TriMesh::new`] but silently drops degenerate faces instead of
    /// failing. Marching-cubes output occasionally contains slivers where the
    /// iso-surface passes through grid corners.
    pub fn new_filtered(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<TriMesh, GeometryError> {
        let kept: Vec<[u32; 3]> = faces
            .into_iter()
            .filter(|f| {
                f.iter().all(|&i| (i as usize) < vertices.len())
                    && triangle_area(
                        vertices[f[0] as usize],
                        vertices[f[1] as usize],
                        vertices[f[2] as usize],
                    ) >= DEGENERATE_AREA
            })
            .collect();
        TriMesh::new(vertices, kept)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i as usize >= self.vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        face: fi,
                        index: i,
                        len: self.vertices.len(),
                    });
                }
            }
            let area = self.face_area(fi);
            if area < DEGENERATE_AREA {
                return Err(GeometryError::DegenerateFace { face: fi, area });
            }
        }
        Ok(())
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> TriMesh {
        assert_eq!(colors.len(), self.vertices.len());
        self.colors = Some(colors);
        self
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.face_vertices(face);
        triangle_area(a, b, c)
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        math::normalize(math::cross(math::sub(b, a), math::sub(c, a)))
    }

    pub fn face_centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        math::scale(math::add(math::add(a, b), c), 1.0 / 3.0)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Position of a barycentric point on a face.
    pub fn bary_point(&self, face: usize, bary: [f64; 3]) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        math::add(
            math::add(math::scale(a, bary[0]), math::scale(b, bary[1])),
            math::scale(c, bary[2]),
        )
    }

    /// Area-weighted per-vertex normals.
    pub fn smooth_vertex_normals(&self) -> Vec<Vec3> {
        smooth_vertex_normals_of(&self.vertices, &self.faces)
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(&self.vertices).expect("empty mesh has no aabb")
    }

    /// V - E + F over the welded index topology.
    pub fn euler_characteristic(&self) -> i64 {
        use std::collections::HashSet;
        let mut edges: HashSet<(u32, u32)> = HashSet::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let used: HashSet<u32> = self.faces.iter().flatten().copied().collect();
        used.len() as i64 - edges.len() as i64 + self.faces.len() as i64
    }

    /// Longitude/latitude sphere used widely in tests and oracles.
    pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriMesh {
        assert!(rings >= 3 && segments >= 3);
        let mut vertices = vec![math::add(center, [0.0, radius, 0.0])];
        for i in 1..rings {
            let phi = std::f64::consts::PI * i as f64 / rings as f64;
            for j in 0..segments {
                let theta = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
                vertices.push(math::add(
                    center,
                    [
                        radius * phi.sin() * theta.cos(),
                        radius * phi.cos(),
                        radius * phi.sin() * theta.sin(),
                    ],
                ));
            }
        }
        vertices.push(math::add(center, [0.0, -radius, 0.0]));
        let south = (vertices.len() - 1) as u32;
        let ring = |i: usize, j: usize| -> u32 { (1 + (i - 1) * segments + j % segments) as u32 };
        let mut faces = Vec::new();
        for j in 0..segments {
            faces.push([0, ring(1, j + 1), ring(1, j)]);
        }
        for i in 1..rings - 1 {
            for j in 0..segments {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j));
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
        for j in 0..segments {
            faces.push([south, ring(rings - 1, j), ring(rings - 1, j + 1)]);
        }
        TriMesh::new(vertices, faces).expect("uv sphere is well formed")
    }

    /// Axis-aligned box mesh (12 triangles, outward orientation).
    pub fn box_mesh(min: Vec3, max: Vec3) -> TriMesh {
        let v = |x: usize, y: usize, z: usize| -> Vec3 {
            [
                if x == 0 { min[0] } else { max[0] },
                if y == 0 { min[1] } else { max[1] },
                if z == 0 { min[2] } else { max[2] },
            ]
        };
        let vertices = vec![
            v(0, 0, 0), v(1, 0, 0), v(1, 1, 0), v(0, 1, 0),
            v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1),
        ];
        let faces = vec![
            [0, 2, 1], [0, 3, 2], // z = min
            [4, 5, 6], [4, 6, 7], // z = max
            [0, 1, 5], [0, 5, 4], // y = min
            [3, 7, 6], [3, 6, 2], // y = max
            [0, 4, 7], [0, 7, 3], // x = min
            [1, 2, 6], [1, 6, 5], // x = max
        ];
        TriMesh::new(vertices, faces).expect("box is well formed")
    }
}

/// Point cloud with mandatory unit normals and an optional color per point.
#[derive(Clone, Debug)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
    /// Normalized time stamp of the frame this cloud observes.
    pub frame_time: f64,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<OrientedPointCloud, GeometryError> {
        if points.len() != normals.len() {
            return Err(GeometryError::LengthMismatch {
                points: points.len(),
                normals: normals.len(),
            });
        }
        for (i, n) in normals.iter().enumerate() {
            let len = math::norm(*n);
            if (len - 1.0).abs() > 1e-6 {
                return Err(GeometryError::NonUnitNormal { index: i, norm: len });
            }
        }
        Ok(OrientedPointCloud {
            points,
            normals,
            colors: None,
            frame_time: 0.0,
        })
    }

    pub fn with_time(mut self, t: f64) -> OrientedPointCloud {
        self.frame_time = t;
        self
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> OrientedPointCloud {
        assert_eq!(colors.len(), self.points.len());
        self.colors = Some(colors);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid local coordinate frame: rotation columns are the frame axes, center
/// is the frame origin in world coordinates.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LocalFrame {
    pub rotation: Mat3,
    pub center: Vec3,
}

impl LocalFrame {
    pub fn new(rotation: Mat3, center: Vec3) -> Result<LocalFrame, GeometryError> {
        let res = rotation
            .mul_mat(&rotation.transpose())
            .max_abs_diff(&Mat3::IDENTITY)
            .max((rotation.det() - 1.0).abs());
        if res > 1e-9 {
            return Err(GeometryError::NotARotation { residual: res });
        }
        Ok(LocalFrame { rotation, center })
    }

    /// World -> local: `R^T (p - c)`.
    #[inline]
    pub fn to_local(&self, p_world: Vec3) -> Vec3 {
        self.rotation.tr_mul_vec(math::sub(p_world, self.center))
    }

    /// Local -> world: `R q + c`.
    #[inline]
    pub fn to_world(&self, p_local: Vec3) -> Vec3 {
        math::add(self.rotation.mul_vec(p_local), self.center)
    }

    /// World-space direction expressed in the local frame.
    #[inline]
    pub fn dir_to_local(&self, d: Vec3) -> Vec3 {
        self.rotation.tr_mul_vec(d)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        for i in 0..3 {
            assert!(min[i] <= max[i], "inverted aabb on axis {i}");
        }
        Aabb { min, max }
    }

    pub fn from_points(points: &[Vec3]) -> Option<Aabb> {
        let first = *points.first()?;
        let mut min = first;
        let mut max = first;
        for &p in &points[1..] {
            min = math::min_elem(min, p);
            max = math::max_elem(max, p);
        }
        Some(Aabb { min, max })
    }

    /// Expands by `pad` on every axis in both directions.
    pub fn padded(&self, pad: f64) -> Aabb {
        Aabb {
            min: math::sub(self.min, [pad; 3]),
            max: math::add(self.max, [pad; 3]),
        }
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: math::min_elem(self.min, o.min),
            max: math::max_elem(self.max, o.max),
        }
    }
}

/// Area-weighted vertex normals over raw buffers (no validation).
pub fn smooth_vertex_normals_of(vertices: &[Vec3], faces: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; vertices.len()];
    for f in faces {
        let (a, b, c) = (
            vertices[f[0] as usize],
            vertices[f[1] as usize],
            vertices[f[2] as usize],
        );
        // cross product length = 2*area, so this is area weighting
        let n = math::cross(math::sub(b, a), math::sub(c, a));
        for &vi in f {
            acc[vi as usize] = math::add(acc[vi as usize], n);
        }
    }
    acc.into_iter()
        .map(|n| math::try_normalize(n).unwrap_or([0.0, 0.0, 1.0]))
        .collect()
}

pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)))
}

/// Builds the local frame of a surface point: the face normal is the first
/// axis, the in-plane direction from the point toward the face's
/// lowest-indexed vertex is the second, and their cross product the third.
/// The second axis is re-projected onto the face plane so the returned matrix
/// is orthonormal to machine precision.
pub fn build_local_frame(
    mesh: &TriMesh,
    face_index: usize,
    point_on_face: Vec3,
) -> Result<LocalFrame, GeometryError> {
    let area = mesh.face_area(face_index);
    if area < DEGENERATE_AREA {
        return Err(GeometryError::DegenerateFace {
            face: face_index,
            area,
        });
    }
    let a1 = mesh.face_normal(face_index);
    let f = mesh.faces[face_index];
    let lowest = *f.iter().min().expect("face has three vertices");
    let vref = mesh.vertices[lowest as usize];
    let d = math::sub(vref, point_on_face);
    let in_plane = math::sub(d, math::scale(a1, math::dot(d, a1)));
    let a2 = math::try_normalize(in_plane).ok_or(GeometryError::DegenerateFace {
        face: face_index,
        area,
    })?;
    let a3 = math::cross(a1, a2);
    LocalFrame::new(Mat3::from_cols(a1, a2, a3), point_on_face)
}

/// A surface sample with provenance: position, generating face and
/// barycentric coordinates.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
    pub face: usize,
    pub bary: [f64; 3],
}

/// Area-weighted uniform surface samples with face provenance.
pub fn sample_surface_with_provenance(
    mesh: &TriMesh,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<SurfaceSample>, GeometryError> {
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    // cumulative area table for inverse-cdf face selection
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let total = acc;
    let mut rng = DetRng::new(rng_seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.uniform() * total;
        let face = match cdf.binary_search_by(|probe| probe.partial_cmp(&target).unwrap()) {
            Ok(i) => (i + 1).min(mesh.faces.len() - 1),
            Err(i) => i.min(mesh.faces.len() - 1),
        };
        let (u, v) = (rng.uniform(), rng.uniform());
        let su = u.sqrt();
        let bary = [1.0 - su, su * (1.0 - v), su * v];
        out.push(SurfaceSample {
            position: mesh.bary_point(face, bary),
            normal: mesh.face_normal(face),
            face,
            bary,
        });
    }
    Ok(out)
}

/// Area-weighted uniform surface sampling; normals come from the generating
/// faces, colors (when the mesh has them) are interpolated barycentrically.
pub fn sample_surface(
    mesh: &TriMesh,
    count: usize,
    rng_seed: u64,
) -> Result<OrientedPointCloud, GeometryError> {
    let samples = sample_surface_with_provenance(mesh, count, rng_seed)?;
    let points: Vec<Vec3> = samples.iter().map(|s| s.position).collect();
    let normals: Vec<Vec3> = samples.iter().map(|s| s.normal).collect();
    let mut cloud = OrientedPointCloud::new(points, normals)?;
    if let Some(colors) = &mesh.colors {
        cloud = cloud.with_colors(
            samples
                .iter()
                .map(|s| {
                    let f = mesh.faces[s.face];
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        for i in 0..3 {
                            c[k] += s.bary[i] * colors[f[i] as usize][k];
                        }
                    }
                    c
                })
                .collect(),
        );
    }
    Ok(cloud)
}

/// Exact k-nearest neighbors from `reference` for every query point.
/// Ties on distance break toward the lower reference index.
pub fn nearest_neighbors(
    query: &[Vec3],
    reference: &[Vec3],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>, GeometryError> {
    if reference.is_empty() {
        return Err(GeometryError::EmptyReference);
    }
    if k > reference.len() {
        return Err(GeometryError::KTooLarge {
            k,
            len: reference.len(),
        });
    }
    let tree = KdTree::build(reference);
    Ok(crate::util::par_chunks(query.len(), 1024, |range| {
        range.map(|i| tree.knn(query[i], k)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect())
}
