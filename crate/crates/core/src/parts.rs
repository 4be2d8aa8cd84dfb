//! Overlapping spherical parts: dart-throw sampling of centers on the inner
//! body, frame tracking through the mesh sequence via barycentric anchors,
//! and covering/nearest queries used to select parts for field evaluation.

use crate::geometry::{build_local_frame, sample_surface_with_provenance, GeometryError, LocalFrame, TriMesh};
use crate::math::{self, Mat3, Vec3};
use crate::util::DetRng;
use thiserror::Error;

/// Surface samples drawn before the dart-throw loop.
pub const CENTER_POOL_SIZE: usize = 100_000;

#[derive(Debug, Error)]
pub enum PartsError {
    #[error("meshes do not share one topology")]
    TopologyMismatch,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
}

/// Anchor of a part on the template: generating face and barycentric coords.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PartAnchor {
    pub face: usize,
    pub bary: [f64; 3],
}

/// One spherical part: its anchor and the tracked frame per time step.
/// Latent codes live in contiguous arrays on [`PartSet`].
#[derive(Clone, Debug)]
pub struct LocalPart {
    pub anchor: PartAnchor,
    pub frames: Vec<LocalFrame>,
}

/// The full part layout for one sequence: shared radius, per-part frames for
/// each tracked time, and latent code tensors (`K x code_dim` row-major).
#[derive(Clone, Debug)]
pub struct PartSet {
    pub radius: f64,
    pub parts: Vec<LocalPart>,
    /// Tracked frame times, ascending in [0, 1].
    pub times: Vec<f64>,
    pub code_dim: usize,
    pub code_m: Vec<f64>,
    pub code_s: Vec<f64>,
    pub code_t: Vec<f64>,
}

impl PartSet {
    pub fn k(&self) -> usize {
        self.parts.len()
    }

    pub fn code_m_of(&self, part: usize) -> &[f64] {
        &self.code_m[part * self.code_dim..(part + 1) * self.code_dim]
    }

    pub fn code_s_of(&self, part: usize) -> &[f64] {
        &self.code_s[part * self.code_dim..(part + 1) * self.code_dim]
    }

    pub fn code_t_of(&self, part: usize) -> &[f64] {
        &self.code_t[part * self.code_dim..(part + 1) * self.code_dim]
    }

    /// Draws all latent codes from N(0, std^2).
    pub fn init_codes(&mut self, std: f64, seed: u64) {
        let mut rng = DetRng::from_parts(&[seed, 0x636f6465]);
        for c in self
            .code_m
            .iter_mut()
            .chain(self.code_s.iter_mut())
            .chain(self.code_t.iter_mut())
        {
            *c = std * rng.normal();
        }
    }

    /// Part frames at an arbitrary time: exact at tracked times, spherical /
    /// linear interpolation between them, clamped to the end frames outside
    /// the tracked span.
    pub fn at_time(&self, t: f64) -> PartsAtTime {
        let frames = self
            .parts
            .iter()
            .map(|p| interpolate_frame(&p.frames, &self.times, t))
            .collect();
        PartsAtTime {
            time: t,
            radius: self.radius,
            frames,
        }
    }

    /// Exact tracked frames of time index `ti`.
    pub fn at_index(&self, ti: usize) -> PartsAtTime {
        PartsAtTime {
            time: self.times[ti],
            radius: self.radius,
            frames: self.parts.iter().map(|p| p.frames[ti]).collect(),
        }
    }
}

fn interpolate_frame(frames: &[LocalFrame], times: &[f64], t: f64) -> LocalFrame {
    debug_assert_eq!(frames.len(), times.len());
    if t <= times[0] {
        return frames[0];
    }
    if t >= *times.last().unwrap() {
        return *frames.last().unwrap();
    }
    let hi = times.partition_point(|&x| x < t).min(times.len() - 1);
    let lo = hi - 1;
    let span = times[hi] - times[lo];
    let alpha = if span > 0.0 { (t - times[lo]) / span } else { 0.0 };
    if alpha.abs() < 1e-9 {
        return frames[lo];
    }
    if (1.0 - alpha).abs() < 1e-9 {
        return frames[hi];
    }
    LocalFrame {
        rotation: Mat3::slerp(&frames[lo].rotation, &frames[hi].rotation, alpha),
        center: math::lerp(frames[lo].center, frames[hi].center, alpha),
    }
}

/// Part frames snapshotted (or interpolated) at one time.
#[derive(Clone, Debug)]
pub struct PartsAtTime {
    pub time: f64,
    pub radius: f64,
    pub frames: Vec<LocalFrame>,
}

impl PartsAtTime {
    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn center(&self, part: usize) -> Vec3 {
        self.frames[part].center
    }

    /// Selects the parts evaluating a query point: a seeded uniform n-subset
    /// of the covering parts when n or more cover it, all coverers when
    /// fewer (but at least one) do, and the n nearest centers when none do.
    pub fn covering_parts(&self, x: Vec3, n: usize, seed: u64) -> Vec<usize> {
        assert!(n >= 1);
        let r2 = self.radius * self.radius;
        let mut coverers: Vec<usize> = Vec::new();
        for (k, f) in self.frames.iter().enumerate() {
            if math::dist2(x, f.center) <= r2 {
                coverers.push(k);
            }
        }
        if coverers.len() >= n {
            let mut rng = DetRng::new(seed);
            rng.partial_shuffle_indices(coverers.len(), n)
                .into_iter()
                .map(|i| coverers[i])
                .collect()
        } else if !coverers.is_empty() {
            coverers
        } else {
            // n nearest with (distance, index) tie-breaking
            let mut pairs: Vec<(f64, usize)> = self
                .frames
                .iter()
                .enumerate()
                .map(|(k, f)| (math::dist2(x, f.center), k))
                .collect();
            let n = n.min(pairs.len());
            pairs.select_nth_unstable_by(n - 1, |a, b| a.partial_cmp(b).unwrap());
            let mut head: Vec<(f64, usize)> = pairs[..n].to_vec();
            head.sort_by(|a, b| a.partial_cmp(b).unwrap());
            head.into_iter().map(|(_, k)| k).collect()
        }
    }
}

/// Dart-throw center sampling: draw a dense surface pool, repeatedly pick a
/// random remaining point, remove everything within 0.5 r of it, and record
/// it as a center. Terminates when the pool is exhausted.
pub fn sample_part_centers(body_mesh: &TriMesh, radius: f64, rng_seed: u64) -> Vec<PartAnchor> {
    sample_part_centers_from_pool(body_mesh, radius, rng_seed, CENTER_POOL_SIZE)
}

pub fn sample_part_centers_from_pool(
    body_mesh: &TriMesh,
    radius: f64,
    rng_seed: u64,
    pool_size: usize,
) -> Vec<PartAnchor> {
    assert!(radius > 0.0);
    let samples = sample_surface_with_provenance(body_mesh, pool_size, rng_seed)
        .expect("center sampling needs a non-empty mesh");
    let exclusion = 0.5 * radius;
    // uniform grid over the pool for O(1) neighborhood removal
    let cell = exclusion;
    let key = |p: Vec3| -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<u32>> = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        grid.entry(key(s.position)).or_default().push(i as u32);
    }
    // alive list with position map for O(1) removal and uniform picks
    let mut alive: Vec<u32> = (0..samples.len() as u32).collect();
    let mut slot_of: Vec<usize> = (0..samples.len()).collect();
    let mut is_alive = vec![true; samples.len()];
    let mut rng = DetRng::new(rng_seed ^ 0x70617274);
    let mut centers = Vec::new();
    let e2 = exclusion * exclusion;
    while !alive.is_empty() {
        let pick = alive[rng.below(alive.len())] as usize;
        let p = samples[pick].position;
        centers.push(PartAnchor {
            face: samples[pick].face,
            bary: samples[pick].bary,
        });
        let (kx, ky, kz) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &cand in bucket {
                        let c = cand as usize;
                        if is_alive[c] && math::dist2(samples[c].position, p) <= e2 {
                            is_alive[c] = false;
                            let slot = slot_of[c];
                            let last = *alive.last().unwrap() as usize;
                            alive.swap_remove(slot);
                            if slot < alive.len() {
                                slot_of[last] = slot;
                            }
                        }
                    }
                }
            }
        }
    }
    centers
}

/// Re-evaluates each anchor on every posed mesh and rebuilds its frame on the
/// same face with the same reference vertex, so frames ride rigidly with the
/// underlying surface patch.
pub fn track_parts(
    anchors: &[PartAnchor],
    body_seq: &[TriMesh],
    times: &[f64],
) -> Result<Vec<LocalPart>, PartsError> {
    assert_eq!(body_seq.len(), times.len());
    let first = &body_seq[0];
    for m in body_seq {
        if m.faces != first.faces {
            return Err(PartsError::TopologyMismatch);
        }
    }
    anchors
        .iter()
        .map(|anchor| {
            let frames = body_seq
                .iter()
                .map(|mesh| {
                    let p = mesh.bary_point(anchor.face, anchor.bary);
                    build_local_frame(mesh, anchor.face, p).map_err(PartsError::from)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LocalPart {
                anchor: *anchor,
                frames,
            })
        })
        .collect()
}

/// Samples parts on the first body frame, tracks them through the sequence
/// and allocates zeroed latent codes.
pub fn build_part_set(
    body_seq: &[TriMesh],
    times: &[f64],
    radius: f64,
    code_dim: usize,
    seed: u64,
) -> Result<PartSet, PartsError> {
    let anchors = sample_part_centers(&body_seq[0], radius, seed);
    let parts = track_parts(&anchors, body_seq, times)?;
    let k = parts.len();
    Ok(PartSet {
        radius,
        parts,
        times: times.to_vec(),
        code_dim,
        code_m: vec![0.0; k * code_dim],
        code_s: vec![0.0; k * code_dim],
        code_t: vec![0.0; k * code_dim],
    })
}

/// A single "global" part covering the whole body: used as the
/// local-vs-global baseline. The radius is the body diagonal so every query
/// point is covered.
pub fn build_global_part_set(
    body_seq: &[TriMesh],
    times: &[f64],
    code_dim: usize,
) -> Result<PartSet, PartsError> {
    let bbox = body_seq[0].aabb();
    let radius = math::norm(bbox.extent()).max(1e-6) * 1.5;
    let anchor = PartAnchor {
        face: 0,
        bary: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    };
    let parts = track_parts(&[anchor], body_seq, times)?;
    Ok(PartSet {
        radius,
        parts,
        times: times.to_vec(),
        code_dim,
        code_m: vec![0.0; code_dim],
        code_s: vec![0.0; code_dim],
        code_t: vec![0.0; code_dim],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MeshDistanceQuery;

    #[test]
    fn dart_throw_covers_pool_and_separates_centers() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.2, 24, 32);
        let radius = 0.05;
        let anchors = sample_part_centers_from_pool(&sphere, radius, 11, 20_000);
        let centers: Vec<Vec3> = anchors
            .iter()
            .map(|a| sphere.bary_point(a.face, a.bary))
            .collect();
        // pairwise separation > 0.5 r
        for i in 0..centers.len() {
            for j in 0..i {
                assert!(math::dist(centers[i], centers[j]) > 0.5 * radius);
            }
        }
        // the removal loop only deletes covered points, so the original pool
        // is within 0.5 r of some center
        let pool = crate::geometry::sample_surface_with_provenance(&sphere, 20_000, 11).unwrap();
        let tree = crate::geometry::KdTree::build(&centers);
        for s in &pool {
            assert!(tree.nearest(s.position).dist <= 0.5 * radius + 1e-12);
        }
    }

    #[test]
    fn dart_throw_count_stable_across_seeds() {
        // unit-diameter sphere (area pi for r_sphere = 0.5), r = 5 cm
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.5, 32, 48);
        let counts: Vec<usize> = (0..10)
            .map(|s| sample_part_centers_from_pool(&sphere, 0.05, s, 50_000).len())
            .collect();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        for &c in &counts {
            assert!(
                (c as f64 - mean).abs() / mean < 0.15,
                "count {c} vs mean {mean}"
            );
        }
    }

    #[test]
    fn tiny_mesh_yields_single_center() {
        // mesh much smaller than 0.5 r: first pick removes everything
        let tri = TriMesh::new(
            vec![[0.0; 3], [0.001, 0.0, 0.0], [0.0, 0.001, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let anchors = sample_part_centers_from_pool(&tri, 0.05, 3, 1000);
        assert_eq!(anchors.len(), 1);
    }

    #[test]
    fn tracked_frames_static_sequence() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.2, 12, 16);
        let seq = vec![sphere.clone(), sphere.clone(), sphere];
        let times = [0.0, 0.5, 1.0];
        let anchors = sample_part_centers_from_pool(&seq[0], 0.06, 5, 5000);
        let parts = track_parts(&anchors, &seq, &times).unwrap();
        for p in &parts {
            for f in &p.frames[1..] {
                assert!(f.rotation.max_abs_diff(&p.frames[0].rotation) < 1e-12);
                assert!(math::dist(f.center, p.frames[0].center) < 1e-12);
            }
        }
    }

    #[test]
    fn tracked_frames_follow_rigid_motion() {
        let sphere = TriMesh::uv_sphere([0.1, 0.0, 0.0], 0.2, 12, 16);
        let q = Mat3::from_axis_angle([0.3, 0.5, -0.2]);
        let shift = [0.2, -0.1, 0.4];
        let moved = TriMesh::new(
            sphere
                .vertices
                .iter()
                .map(|&v| math::add(q.mul_vec(v), shift))
                .collect(),
            sphere.faces.clone(),
        )
        .unwrap();
        let seq = vec![sphere, moved];
        let anchors = sample_part_centers_from_pool(&seq[0], 0.08, 9, 4000);
        let parts = track_parts(&anchors, &seq, &[0.0, 1.0]).unwrap();
        for p in &parts {
            let expected_rot = q.mul_mat(&p.frames[0].rotation);
            assert!(p.frames[1].rotation.max_abs_diff(&expected_rot) < 1e-9);
            let expected_center = math::add(q.mul_vec(p.frames[0].center), shift);
            assert!(math::dist(p.frames[1].center, expected_center) < 1e-9);
        }
    }

    #[test]
    fn tracked_centers_stay_on_surface() {
        // articulated-ish deformation: squash + bend the sphere per frame
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.2, 16, 24);
        let deform = |v: Vec3, t: f64| -> Vec3 {
            let bend = 0.3 * t * v[1];
            [v[0] * (1.0 + 0.2 * t) + bend, v[1], v[2] * (1.0 - 0.15 * t)]
        };
        let seq: Vec<TriMesh> = (0..3)
            .map(|i| {
                let t = i as f64 / 2.0;
                TriMesh::new(
                    sphere.vertices.iter().map(|&v| deform(v, t)).collect(),
                    sphere.faces.clone(),
                )
                .unwrap()
            })
            .collect();
        let anchors = sample_part_centers_from_pool(&seq[0], 0.07, 2, 4000);
        let parts = track_parts(&anchors, &seq, &[0.0, 0.5, 1.0]).unwrap();
        for (ti, mesh) in seq.iter().enumerate() {
            let query = MeshDistanceQuery::new(mesh);
            for p in &parts {
                assert!(query.closest(p.frames[ti].center).dist < 1e-9);
            }
        }
    }

    #[test]
    fn covering_subset_semantics() {
        // centers on a line, radius 1
        let frames: Vec<LocalFrame> = (0..6)
            .map(|i| LocalFrame {
                rotation: Mat3::IDENTITY,
                center: [i as f64 * 0.5, 0.0, 0.0],
            })
            .collect();
        let pat = PartsAtTime {
            time: 0.0,
            radius: 1.0,
            frames,
        };
        // x at center 0: coverers {0, 1, 2}; ask for 2
        let sel = pat.covering_parts([0.0; 3], 2, 42);
        assert_eq!(sel.len(), 2);
        for &k in &sel {
            assert!(math::dist(pat.center(k), [0.0; 3]) <= 1.0);
        }
        // far point: the n nearest centers, which are the last ones
        let sel = pat.covering_parts([10.0, 0.0, 0.0], 3, 42);
        assert_eq!(sel, vec![5, 4, 3]);
        // exactly one coverer with n = 1
        let sel = pat.covering_parts([2.5 + 0.99, 0.0, 0.0], 1, 7);
        assert_eq!(sel, vec![5]);
        // fewer coverers than n: all of them, no padding
        let sel = pat.covering_parts([2.5 + 0.99, 0.0, 0.0], 4, 7);
        assert_eq!(sel, vec![5]);
    }

    #[test]
    fn covering_selection_is_uniform_over_seeds() {
        let frames: Vec<LocalFrame> = (0..5)
            .map(|i| LocalFrame {
                rotation: Mat3::IDENTITY,
                center: [i as f64 * 0.01, 0.0, 0.0],
            })
            .collect();
        let pat = PartsAtTime {
            time: 0.0,
            radius: 1.0,
            frames,
        };
        let mut counts = [0usize; 5];
        let trials = 20_000;
        for seed in 0..trials {
            for k in pat.covering_parts([0.0; 3], 2, seed) {
                counts[k] += 1;
            }
        }
        // each of 5 coverers should appear with frequency n/|coverers| = 0.4
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.4).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn frame_interpolation_endpoints_and_orthonormality() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.2, 12, 16);
        let q = Mat3::from_axis_angle([0.0, 0.8, 0.0]);
        let moved = TriMesh::new(
            sphere.vertices.iter().map(|&v| q.mul_vec(v)).collect(),
            sphere.faces.clone(),
        )
        .unwrap();
        let seq = vec![sphere, moved];
        let mut ps = build_part_set(&seq, &[0.0, 1.0], 0.08, 8, 3).unwrap();
        ps.init_codes(0.01, 5);
        let mid = ps.at_time(0.5);
        for f in &mid.frames {
            let res = f
                .rotation
                .mul_mat(&f.rotation.transpose())
                .max_abs_diff(&Mat3::IDENTITY);
            assert!(res < 1e-12);
        }
        let t0 = ps.at_time(0.0);
        let t0_exact = ps.at_index(0);
        for (a, b) in t0.frames.iter().zip(&t0_exact.frames) {
            assert!(a.rotation.max_abs_diff(&b.rotation) < 1e-15);
        }
        // clamped outside the span
        let beyond = ps.at_time(1.5);
        for (a, b) in beyond.frames.iter().zip(&ps.at_index(1).frames) {
            assert!(a.rotation.max_abs_diff(&b.rotation) < 1e-15);
            assert!(math::dist(a.center, b.center) < 1e-15);
        }
    }
}
