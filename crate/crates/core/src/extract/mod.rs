//! Iso-surface extraction: rectangular SDF volumes, marching cubes, the
//! normal-alignment post-process that strips interior back-faces and
//! floaters, and vertex colorization.

mod mc;

pub use mc::marching_cubes;

use crate::geometry::{Aabb, GeometryError, KdTree, OrientedPointCloud, TriMesh};
use crate::math::{self, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("volume contains no iso crossing")]
    EmptySurface,
    #[error("post-processing discarded every face (threshold too high)")]
    EmptyResult,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Rectangular grid of signed-distance samples. `dims` counts grid points
/// per axis (>= 2); `values` is laid out x-fastest.
#[derive(Clone, Debug)]
pub struct SdfVolume {
    pub origin: Vec3,
    pub spacing: Vec3,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl SdfVolume {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        ]
    }

    /// Raw little-endian f64 grid plus a JSON sidecar describing it.
    pub fn write_raw(&self, base: &std::path::Path) -> Result<(), ExtractError> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(base.with_extension("f64"))?);
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        let sidecar = serde_json::json!({
            "origin": self.origin,
            "spacing": self.spacing,
            "dims": self.dims,
        });
        std::fs::write(
            base.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("volume sidecar serializes"),
        )?;
        Ok(())
    }
}

/// Grid dimensions for a box: the longest axis gets `resolution` grid points,
/// the others proportionally fewer (never below 2). A degenerate axis
/// (zero extent) is clamped to 2 points.
pub fn volume_dims(bbox: &Aabb, resolution: usize) -> ([usize; 3], Vec3) {
    assert!(resolution >= 2);
    let ext = bbox.extent();
    let longest = ext[0].max(ext[1]).max(ext[2]);
    let mut dims = [2usize; 3];
    let mut spacing = [0.0f64; 3];
    if longest <= 0.0 {
        return (dims, [1e-9; 3]);
    }
    let step = longest / (resolution - 1) as f64;
    for a in 0..3 {
        let n = ((ext[a] / step).round() as usize + 1).max(2);
        dims[a] = n.min(resolution);
        spacing[a] = if ext[a] > 0.0 {
            ext[a] / (dims[a] - 1) as f64
        } else {
            step
        };
    }
    (dims, spacing)
}

/// Evaluates `field` at every grid point of the padded box. Evaluation is
/// chunked over z-slabs; the field must be pure.
pub fn build_volume<F>(bbox: &Aabb, resolution: usize, field: F) -> SdfVolume
where
    F: Fn(Vec3) -> f64 + Send + Sync,
{
    let (dims, spacing) = volume_dims(bbox, resolution);
    let [nx, ny, nz] = dims;
    let origin = bbox.min;
    let slabs = crate::util::par_chunks(nz, 1, |range| {
        let mut out = Vec::with_capacity((range.end - range.start) * nx * ny);
        for k in range {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(field([
                        origin[0] + spacing[0] * i as f64,
                        origin[1] + spacing[1] * j as f64,
                        origin[2] + spacing[2] * k as f64,
                    ]));
                }
            }
        }
        out
    });
    SdfVolume {
        origin,
        spacing,
        dims,
        values: slabs.concat(),
    }
}

/// Per-vertex colors from a pure color field.
pub fn colorize<F>(mesh: &TriMesh, color_field: F) -> TriMesh
where
    F: Fn(Vec3) -> [f64; 3] + Send + Sync,
{
    let colors = crate::util::par_chunks(mesh.vertices.len(), 512, |range| {
        range
            .map(|i| color_field(mesh.vertices[i]))
            .collect::<Vec<_>>()
    })
    .concat();
    mesh.clone().with_colors(colors)
}

/// Parameters of the normal-alignment post-process.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PostprocessParams {
    /// Input points consulted per face.
    pub k_neighbors: usize,
    /// Faces with smoothed alignment score below this cosine are dropped.
    pub align_threshold: f64,
    /// Laplacian smoothing passes over the face-adjacency graph.
    pub smoothing_passes: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            k_neighbors: 10,
            align_threshold: 0.0,
            smoothing_passes: 1,
        }
    }
}

/// Removes interior back-faces and floaters: per-face normal alignment
/// against the input cloud, score smoothing over face adjacency, thresholding
/// (iterated to a fixed point so the operation is idempotent), then keeping
/// the largest edge-connected component.
pub fn postprocess(
    mesh: &TriMesh,
    input_cloud: &OrientedPointCloud,
    params: &PostprocessParams,
) -> Result<TriMesh, ExtractError> {
    if input_cloud.is_empty() {
        return Err(GeometryError::EmptyReference.into());
    }
    let tree = KdTree::build(&input_cloud.points);
    let k = params.k_neighbors.min(input_cloud.len());
    // raw alignment scores are independent of which faces survive
    let raw: Vec<f64> = crate::util::par_chunks(mesh.faces.len(), 256, |range| {
        range
            .map(|f| {
                let centroid = mesh.face_centroid(f);
                let normal = mesh.face_normal(f);
                let nn = tree.knn(centroid, k);
                let mut s = 0.0;
                for n in &nn {
                    s += math::dot(normal, input_cloud.normals[n.index]);
                }
                s / nn.len() as f64
            })
            .collect::<Vec<_>>()
    })
    .concat();

    let adjacency = face_adjacency(mesh);
    let mut alive: Vec<bool> = vec![true; mesh.faces.len()];
    loop {
        // smooth scores over currently-alive neighbors
        let mut scores: Vec<f64> = raw.clone();
        for _ in 0..params.smoothing_passes {
            let prev = scores.clone();
            for f in 0..mesh.faces.len() {
                if !alive[f] {
                    continue;
                }
                let mut acc = prev[f];
                let mut cnt = 1.0;
                for &nb in &adjacency[f] {
                    if alive[nb as usize] {
                        acc += prev[nb as usize];
                        cnt += 1.0;
                    }
                }
                scores[f] = acc / cnt;
            }
        }
        let mut changed = false;
        for f in 0..mesh.faces.len() {
            if alive[f] && scores[f] < params.align_threshold {
                alive[f] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<usize> = (0..mesh.faces.len()).filter(|&f| alive[f]).collect();
    if kept.is_empty() {
        return Err(ExtractError::EmptyResult);
    }
    let component = largest_component(&kept, &adjacency);
    Ok(submesh(mesh, &component))
}


/// Extraction settings: grid resolution along the longest axis, part count
/// for SDF averaging, padding of the body box, and the post-process.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ExtractConfig {
    pub resolution: usize,
    pub n_parts: usize,
    pub padding: f64,
    pub seed: u64,
    pub postprocess: Option<PostprocessParams>,
    pub colorize: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            resolution: 256,
            n_parts: 32,
            padding: 0.10,
            seed: 0,
            postprocess: Some(PostprocessParams::default()),
            colorize: false,
        }
    }
}

/// Evaluates the composed part field over every grid point of the box.
/// Chunked over z-slabs with one evaluation workspace per slab.
pub fn build_volume_field(
    model: &crate::fields::FieldModel,
    parts: &crate::parts::PartSet,
    pat: &crate::parts::PartsAtTime,
    caches: &crate::fields::PartCodeCaches,
    bbox: &Aabb,
    cfg: &ExtractConfig,
) -> SdfVolume {
    let (dims, spacing) = volume_dims(bbox, cfg.resolution);
    let [nx, ny, nz] = dims;
    let origin = bbox.min;
    let slabs = crate::util::par_chunks(nz, 1, |range| {
        let mut ws = crate::fields::FieldWorkspace::new(model);
        let mut out = Vec::with_capacity((range.end - range.start) * nx * ny);
        for k in range {
            for j in 0..ny {
                for i in 0..nx {
                    let p = [
                        origin[0] + spacing[0] * i as f64,
                        origin[1] + spacing[1] * j as f64,
                        origin[2] + spacing[2] * k as f64,
                    ];
                    let salt = (i + nx * (j + ny * k)) as u64;
                    out.push(crate::fields::field_sdf(
                        model,
                        Some(caches),
                        parts,
                        pat,
                        p,
                        cfg.n_parts,
                        cfg.seed,
                        salt,
                        &mut ws,
                    ));
                }
            }
        }
        out
    });
    SdfVolume {
        origin,
        spacing,
        dims,
        values: slabs.concat(),
    }
}

/// Extracts one frame: padded body box, dense SDF volume, marching cubes,
/// optional post-processing against the observed cloud, optional vertex
/// colors from the texture field.
pub fn extract_frame(
    model: &crate::fields::FieldModel,
    parts: &crate::parts::PartSet,
    time: f64,
    body_mesh: &TriMesh,
    cloud: Option<&OrientedPointCloud>,
    cfg: &ExtractConfig,
) -> Result<TriMesh, ExtractError> {
    let pat = parts.at_time(time);
    let caches = crate::fields::PartCodeCaches::build(model, parts);
    let bbox = body_mesh.aabb().padded(cfg.padding);
    let volume = build_volume_field(model, parts, &pat, &caches, &bbox, cfg);
    let mut mesh = marching_cubes(&volume, 0.0)?;
    if let (Some(params), Some(cloud)) = (&cfg.postprocess, cloud) {
        mesh = postprocess(&mesh, cloud, params)?;
    }
    if cfg.colorize {
        let colors = crate::util::par_chunks(mesh.vertices.len(), 256, |range| {
            let mut ws = crate::fields::FieldWorkspace::new(model);
            range
                .map(|vi| {
                    crate::fields::field_rgb(
                        model,
                        parts,
                        &pat,
                        mesh.vertices[vi],
                        cfg.n_parts,
                        cfg.seed,
                        vi as u64,
                        &mut ws,
                    )
                })
                .collect::<Vec<_>>()
        })
        .concat();
        mesh = mesh.with_colors(colors);
    }
    Ok(mesh)
}

/// Extracts a mesh per requested time. `body_seq` supplies the inner body
/// (for the bounding box) at each requested time; `clouds`, when given,
/// provides the per-time observation for post-processing.
pub fn extract_sequence(
    model: &crate::fields::FieldModel,
    parts: &crate::parts::PartSet,
    times: &[f64],
    body_seq: &[TriMesh],
    clouds: Option<&[OrientedPointCloud]>,
    cfg: &ExtractConfig,
) -> Result<Vec<TriMesh>, ExtractError> {
    assert_eq!(times.len(), body_seq.len());
    if let Some(c) = clouds {
        assert_eq!(c.len(), times.len());
    }
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            extract_frame(
                model,
                parts,
                t,
                &body_seq[i],
                clouds.map(|c| &c[i]),
                cfg,
            )
        })
        .collect()
}

/// Correspondence coloring: each vertex is mapped to the canonical frame by
/// the motion model (through its nearest covering part) and the canonical
/// position is color-mapped. Matching colors across frames indicate
/// corresponding surface points.
pub fn colorize_correspondence(
    model: &crate::fields::FieldModel,
    parts: &crate::parts::PartSet,
    pat: &crate::parts::PartsAtTime,
    mesh: &TriMesh,
    bbox: &Aabb,
) -> TriMesh {
    let ext = bbox.extent();
    let colors = crate::util::par_chunks(mesh.vertices.len(), 256, |range| {
        let mut ws = crate::fields::FieldWorkspace::new(model);
        range
            .map(|vi| {
                let x = mesh.vertices[vi];
                let sel = pat.covering_parts(x, 1, vi as u64);
                let k = sel[0];
                let x_loc = pat.frames[k].to_local(x);
                let delta =
                    crate::fields::motion_forward(model, parts.code_m_of(k), x_loc, pat.time, &mut ws);
                // canonical-frame world position under the part's frame 0
                let canon = parts.parts[k].frames[0].to_world(crate::math::add(x_loc, delta));
                [
                    ((canon[0] - bbox.min[0]) / ext[0].max(1e-9)).clamp(0.0, 1.0),
                    ((canon[1] - bbox.min[1]) / ext[1].max(1e-9)).clamp(0.0, 1.0),
                    ((canon[2] - bbox.min[2]) / ext[2].max(1e-9)).clamp(0.0, 1.0),
                ]
            })
            .collect::<Vec<_>>()
    })
    .concat();
    mesh.clone().with_colors(colors)
}

/// Face adjacency over shared edges.
fn face_adjacency(mesh: &TriMesh) -> Vec<Vec<u32>> {
    use std::collections::HashMap;
    let mut edge_faces: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            edge_faces
                .entry((a.min(b), a.max(b)))
                .or_default()
                .push(fi as u32);
        }
    }
    let mut adj = vec![Vec::new(); mesh.faces.len()];
    for faces in edge_faces.values() {
        for &a in faces {
            for &b in faces {
                if a != b {
                    adj[a as usize].push(b);
                }
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

fn largest_component(kept: &[usize], adjacency: &[Vec<u32>]) -> Vec<usize> {
    let alive: std::collections::HashSet<usize> = kept.iter().copied().collect();
    let mut visited: std::collections::HashSet<usize> = std::collections::HashSet::new();
    let mut best: Vec<usize> = Vec::new();
    for &start in kept {
        if visited.contains(&start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        visited.insert(start);
        while let Some(f) = stack.pop() {
            comp.push(f);
            for &nb in &adjacency[f] {
                let nb = nb as usize;
                if alive.contains(&nb) && visited.insert(nb) {
                    stack.push(nb);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Extracts the sub-mesh of the given faces with reindexed vertices.
fn submesh(mesh: &TriMesh, faces: &[usize]) -> TriMesh {
    let mut remap: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut vertices = Vec::new();
    let mut colors = mesh.colors.as_ref().map(|_| Vec::new());
    let mut new_faces = Vec::with_capacity(faces.len());
    for &f in faces {
        let mut tri = [0u32; 3];
        for (slot, &vi) in mesh.faces[f].iter().enumerate() {
            let id = *remap.entry(vi).or_insert_with(|| {
                vertices.push(mesh.vertices[vi as usize]);
                if let (Some(cs), Some(src)) = (&mut colors, &mesh.colors) {
                    cs.push(src[vi as usize]);
                }
                (vertices.len() - 1) as u32
            });
            tri[slot] = id;
        }
        new_faces.push(tri);
    }
    let mesh = TriMesh::new(vertices, new_faces).expect("submesh of a valid mesh is valid");
    match colors {
        Some(cs) => mesh.with_colors(cs),
        None => mesh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_surface;

    fn sphere_volume(radius: f64, resolution: usize) -> SdfVolume {
        let bbox = Aabb::new([-0.3; 3], [0.3; 3]);
        build_volume(&bbox, resolution, |p| math::norm(p) - radius)
    }

    #[test]
    fn volume_passes_through_oracle_values() {
        let vol = sphere_volume(0.2, 32);
        for (idx, &v) in vol.values.iter().enumerate() {
            let k = idx / (vol.dims[0] * vol.dims[1]);
            let j = (idx / vol.dims[0]) % vol.dims[1];
            let i = idx % vol.dims[0];
            let p = vol.position(i, j, k);
            assert_eq!(v, math::norm(p) - 0.2);
        }
    }

    #[test]
    fn degenerate_axis_clamped() {
        let bbox = Aabb::new([0.0; 3], [1.0, 0.0, 1.0]);
        let (dims, _) = volume_dims(&bbox, 16);
        assert_eq!(dims, [16, 2, 16]);
    }

    #[test]
    fn volume_is_deterministic() {
        let a = sphere_volume(0.2, 24);
        let b = sphere_volume(0.2, 24);
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn sphere_radius_error_within_spacing() {
        let resolution = 96;
        let vol = sphere_volume(0.2, resolution);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let spacing = vol.spacing[0];
        let mean_err: f64 = mesh
            .vertices
            .iter()
            .map(|v| (math::norm(*v) - 0.2).abs())
            .sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(mean_err < 1.5 * spacing, "mean err {mean_err}, spacing {spacing}");
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn doubling_resolution_reduces_error() {
        let err_at = |res: usize| {
            let vol = sphere_volume(0.2, res);
            let mesh = marching_cubes(&vol, 0.0).unwrap();
            mesh.vertices
                .iter()
                .map(|v| (math::norm(*v) - 0.2).abs())
                .sum::<f64>()
                / mesh.vertices.len() as f64
        };
        let coarse = err_at(48);
        let fine = err_at(96);
        assert!(coarse / fine >= 1.7, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn all_positive_volume_is_empty() {
        let bbox = Aabb::new([-0.1; 3], [0.1; 3]);
        let vol = build_volume(&bbox, 8, |_| 1.0);
        assert!(matches!(marching_cubes(&vol, 0.0), Err(ExtractError::EmptySurface)));
    }

    #[test]
    fn orientation_outward_and_flips_with_sign() {
        let vol = sphere_volume(0.2, 32);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        // outward: face normal aligns with position direction on a sphere
        let mut agree = 0usize;
        for f in 0..mesh.faces.len() {
            let n = mesh.face_normal(f);
            let c = mesh.face_centroid(f);
            if math::dot(n, math::normalize(c)) > 0.0 {
                agree += 1;
            }
        }
        assert_eq!(agree, mesh.faces.len(), "normals must point toward positive sdf");

        let flipped = SdfVolume {
            values: vol.values.iter().map(|v| -v).collect(),
            ..vol.clone()
        };
        let fmesh = marching_cubes(&flipped, 0.0).unwrap();
        assert_eq!(fmesh.vertices.len(), mesh.vertices.len());
        let mut inward = 0usize;
        for f in 0..fmesh.faces.len() {
            let n = fmesh.face_normal(f);
            let c = fmesh.face_centroid(f);
            if math::dot(n, math::normalize(c)) < 0.0 {
                inward += 1;
            }
        }
        assert_eq!(inward, fmesh.faces.len());
    }

    #[test]
    fn postprocess_keeps_self_consistent_sphere() {
        let vol = sphere_volume(0.2, 48);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let cloud = sample_surface(&mesh, 4000, 3).unwrap();
        let out = postprocess(&mesh, &cloud, &PostprocessParams::default()).unwrap();
        assert_eq!(out.faces.len(), mesh.faces.len());
    }

    #[test]
    fn postprocess_removes_inverted_interior_sphere() {
        // outer sphere plus a small interior bubble whose normals point inward
        let bbox = Aabb::new([-0.3; 3], [0.3; 3]);
        let vol = build_volume(&bbox, 48, |p| {
            let r = math::norm(p);
            if r > 0.14 {
                r - 0.2
            } else {
                0.08 - r
            }
        });
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        // the observation covers only the outer surface
        let outer = TriMesh::uv_sphere([0.0; 3], 0.2, 32, 48);
        let cloud = sample_surface(&outer, 4000, 5).unwrap();
        let out = postprocess(&mesh, &cloud, &PostprocessParams::default()).unwrap();
        // interior sphere faces (radius ~0.08) must be gone
        for v in &out.vertices {
            assert!(math::norm(*v) > 0.15, "interior vertex survived: {v:?}");
        }
    }

    #[test]
    fn postprocess_is_idempotent() {
        let vol = sphere_volume(0.2, 40);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.2, 24, 32);
        let cloud = sample_surface(&sphere, 3000, 7).unwrap();
        let params = PostprocessParams {
            align_threshold: 0.6,
            ..Default::default()
        };
        let once = postprocess(&mesh, &cloud, &params).unwrap();
        let twice = postprocess(&once, &cloud, &params).unwrap();
        assert_eq!(once.vertices, twice.vertices);
        assert_eq!(once.faces, twice.faces);
    }

    #[test]
    fn threshold_minus_one_keeps_largest_component_only() {
        // two disjoint spheres; accept-all threshold keeps only the bigger
        let bbox = Aabb::new([-0.5; 3], [0.5; 3]);
        let vol = build_volume(&bbox, 64, |p| {
            let a = math::norm(math::sub(p, [-0.25, 0.0, 0.0])) - 0.18;
            let b = math::norm(math::sub(p, [0.3, 0.0, 0.0])) - 0.08;
            a.min(b)
        });
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let sphere = TriMesh::uv_sphere([-0.25, 0.0, 0.0], 0.18, 24, 32);
        let cloud = sample_surface(&sphere, 2000, 9).unwrap();
        let params = PostprocessParams {
            align_threshold: -1.0,
            ..Default::default()
        };
        let out = postprocess(&mesh, &cloud, &params).unwrap();
        for v in &out.vertices {
            assert!(v[0] < 0.0, "small component survived at {v:?}");
        }
    }
}
