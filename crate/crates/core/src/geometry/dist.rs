//! Point-to-mesh distance queries, accelerated by a kd-tree over face
//! centroids with a conservative expansion bound.

use super::{KdTree, TriMesh};
use crate::math::{self, Vec3};

/// Closest point on triangle (a, b, c) to p. Ericson's region method.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = math::sub(b, a);
    let ac = math::sub(c, a);
    let ap = math::sub(p, a);
    let d1 = math::dot(ab, ap);
    let d2 = math::dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = math::sub(p, b);
    let d3 = math::dot(ab, bp);
    let d4 = math::dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return math::add(a, math::scale(ab, v));
    }
    let cp = math::sub(p, c);
    let d5 = math::dot(ab, cp);
    let d6 = math::dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return math::add(a, math::scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return math::add(b, math::scale(math::sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    math::add(a, math::add(math::scale(ab, v), math::scale(ac, w)))
}

pub struct MeshDistanceQuery<'a> {
    mesh: &'a TriMesh,
    centroid_tree: KdTree,
    /// Largest centroid-to-vertex distance over all faces; bounds how far a
    /// face surface can extend past its centroid.
    max_face_radius: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub face: usize,
    pub point: Vec3,
    pub dist: f64,
}

impl<'a> MeshDistanceQuery<'a> {
    pub fn new(mesh: &'a TriMesh) -> MeshDistanceQuery<'a> {
        let centroids: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_centroid(f)).collect();
        let mut max_face_radius: f64 = 0.0;
        for f in 0..mesh.faces.len() {
            let c = centroids[f];
            for v in mesh.face_vertices(f) {
                max_face_radius = max_face_radius.max(math::dist(c, v));
            }
        }
        MeshDistanceQuery {
            mesh,
            centroid_tree: KdTree::build(&centroids),
            max_face_radius,
        }
    }

    /// Closest surface point to `p` (exact).
    pub fn closest(&self, p: Vec3) -> SurfaceHit {
        let mut k = 8usize;
        loop {
            k = k.min(self.mesh.faces.len());
            let cands = self.centroid_tree.knn(p, k);
            let mut best = SurfaceHit {
                face: usize::MAX,
                point: [0.0; 3],
                dist: f64::INFINITY,
            };
            for n in &cands {
                let [a, b, c] = self.mesh.face_vertices(n.index);
                let q = closest_point_on_triangle(p, a, b, c);
                let d = math::dist(p, q);
                if d < best.dist {
                    best = SurfaceHit {
                        face: n.index,
                        point: q,
                        dist: d,
                    };
                }
            }
            let worst_centroid = cands.last().unwrap().dist;
            // any unexamined face has centroid farther than worst_centroid,
            // hence surface farther than worst_centroid - max_face_radius
            if k == self.mesh.faces.len() || worst_centroid - self.max_face_radius > best.dist {
                return best;
            }
            k *= 4;
        }
    }

    /// Signed distance, positive outside by face orientation. Reliable for
    /// watertight meshes with outward normals.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let hit = self.closest(p);
        let n = self.mesh.face_normal(hit.face);
        let side = math::dot(math::sub(p, hit.point), n);
        if side >= 0.0 {
            hit.dist
        } else {
            -hit.dist
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::DetRng;

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        // interior projection
        let q = closest_point_on_triangle([0.2, 0.2, 1.0], a, b, c);
        assert!(math::dist(q, [0.2, 0.2, 0.0]) < 1e-15);
        // vertex region
        let q = closest_point_on_triangle([-1.0, -1.0, 0.0], a, b, c);
        assert!(math::dist(q, a) < 1e-15);
        // edge region
        let q = closest_point_on_triangle([0.5, -1.0, 0.0], a, b, c);
        assert!(math::dist(q, [0.5, 0.0, 0.0]) < 1e-15);
    }

    #[test]
    fn sphere_signed_distance() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.5, 48, 64);
        let query = MeshDistanceQuery::new(&sphere);
        let mut rng = DetRng::new(4);
        for _ in 0..200 {
            let dir = math::normalize([rng.normal(), rng.normal(), rng.normal()]);
            let r = rng.range(0.1, 1.0);
            let sd = query.signed_distance(math::scale(dir, r));
            // tessellation error bound
            assert!((sd - (r - 0.5)).abs() < 5e-3, "r {r} sd {sd}");
        }
    }

    #[test]
    fn accelerated_matches_brute_force() {
        let sphere = TriMesh::uv_sphere([0.1, -0.2, 0.3], 0.4, 12, 16);
        let query = MeshDistanceQuery::new(&sphere);
        let mut rng = DetRng::new(8);
        for _ in 0..100 {
            let p = [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)];
            let fast = query.closest(p).dist;
            let brute = (0..sphere.faces.len())
                .map(|f| {
                    let [a, b, c] = sphere.face_vertices(f);
                    math::dist(p, closest_point_on_triangle(p, a, b, c))
                })
                .fold(f64::INFINITY, f64::min);
            assert!((fast - brute).abs() < 1e-12);
        }
    }
}
