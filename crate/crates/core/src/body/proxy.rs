//! Procedural skinned body proxy: a capsule-skeleton SDF meshed once with
//! marching cubes, bone-distance skinning weights, and a smooth radial shape
//! basis. All randomness is fixed by the build seed shipped in the template
//! file.

use super::{BodyTemplate, NUM_JOINTS, NUM_SHAPE};
use crate::extract::{build_volume, marching_cubes};
use crate::geometry::{sample_surface_with_provenance, Aabb};
use crate::math::{self, Vec3};
use crate::util::DetRng;

/// Template scale presets. `Full` is human-sized (~1.9 m^2 surface);
/// `Desk` is the reduced-area variant used by fast experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BodyPreset {
    Full,
    Desk,
}

impl BodyPreset {
    pub fn scale(self) -> f64 {
        match self {
            BodyPreset::Full => 1.0,
            BodyPreset::Desk => 0.32,
        }
    }

    pub fn parse(s: &str) -> Option<BodyPreset> {
        match s {
            "full" => Some(BodyPreset::Full),
            "desk" => Some(BodyPreset::Desk),
            _ => None,
        }
    }
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine",
    "chest",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

pub fn joint_index(name: &str) -> usize {
    JOINT_NAMES
        .iter()
        .position(|&n| n == name)
        .unwrap_or_else(|| panic!("unknown joint {name}"))
}

/// Rest joint positions at full scale (meters, Y up, T-pose).
const JOINTS_FULL: [Vec3; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],   // pelvis
    [0.0, 1.10, 0.0],   // spine
    [0.0, 1.25, 0.0],   // chest
    [0.0, 1.48, 0.0],   // head
    [0.18, 1.40, 0.0],  // l_shoulder
    [0.45, 1.40, 0.0],  // l_elbow
    [0.70, 1.40, 0.0],  // l_wrist
    [-0.18, 1.40, 0.0], // r_shoulder
    [-0.45, 1.40, 0.0], // r_elbow
    [-0.70, 1.40, 0.0], // r_wrist
    [0.09, 0.90, 0.0],  // l_hip
    [0.10, 0.50, 0.0],  // l_knee
    [0.10, 0.10, 0.0],  // l_ankle
    [-0.09, 0.90, 0.0], // r_hip
    [-0.10, 0.50, 0.0], // r_knee
    [-0.10, 0.10, 0.0], // r_ankle
];

const PARENT: [i32; NUM_JOINTS] = [-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14];

/// Flesh capsules: (endpoint a, endpoint b, radius a, radius b).
const CAPSULES_FULL: [(Vec3, Vec3, f64, f64); 15] = [
    ([0.0, 0.92, 0.0], [0.0, 1.28, 0.0], 0.115, 0.125), // torso
    ([0.09, 0.90, 0.0], [-0.09, 0.90, 0.0], 0.095, 0.095), // hip bar
    ([0.0, 1.28, 0.0], [0.0, 1.42, 0.0], 0.055, 0.05),  // neck
    ([0.0, 1.47, 0.0], [0.0, 1.56, 0.0], 0.095, 0.095), // head
    ([0.0, 1.36, 0.0], [0.18, 1.40, 0.0], 0.075, 0.055), // l clavicle
    ([0.0, 1.36, 0.0], [-0.18, 1.40, 0.0], 0.075, 0.055), // r clavicle
    ([0.18, 1.40, 0.0], [0.45, 1.40, 0.0], 0.05, 0.042), // l upper arm
    ([0.45, 1.40, 0.0], [0.78, 1.40, 0.0], 0.04, 0.038), // l forearm+hand
    ([-0.18, 1.40, 0.0], [-0.45, 1.40, 0.0], 0.05, 0.042), // r upper arm
    ([-0.45, 1.40, 0.0], [-0.78, 1.40, 0.0], 0.04, 0.038), // r forearm+hand
    ([0.09, 0.90, 0.0], [0.10, 0.50, 0.0], 0.075, 0.055), // l thigh
    ([0.10, 0.50, 0.0], [0.10, 0.10, 0.0], 0.052, 0.042), // l calf
    ([0.10, 0.10, 0.0], [0.10, 0.04, 0.13], 0.04, 0.038), // l foot
    ([-0.09, 0.90, 0.0], [-0.10, 0.50, 0.0], 0.075, 0.055), // r thigh
    ([-0.10, 0.50, 0.0], [-0.10, 0.10, 0.0], 0.052, 0.042), // r calf
];

const CAPSULES_FULL_EXTRA: [(Vec3, Vec3, f64, f64); 1] =
    [([-0.10, 0.10, 0.0], [-0.10, 0.04, 0.13], 0.04, 0.038)]; // r foot

/// Weight bone per joint: segment from the joint toward its primary child
/// (or a short extension for leaves).
fn weight_bones(scale: f64) -> [(Vec3, Vec3); NUM_JOINTS] {
    let j = |i: usize| math::scale(JOINTS_FULL[i], scale);
    let s = |v: Vec3| math::scale(v, scale);
    [
        (j(0), j(1)),                     // pelvis
        (j(1), j(2)),                     // spine
        (j(2), s([0.0, 1.42, 0.0])),      // chest
        (j(3), s([0.0, 1.60, 0.0])),      // head
        (j(4), j(5)),                     // l_shoulder
        (j(5), j(6)),                     // l_elbow
        (j(6), s([0.78, 1.40, 0.0])),     // l_wrist
        (j(7), j(8)),                     // r_shoulder
        (j(8), j(9)),                     // r_elbow
        (j(9), s([-0.78, 1.40, 0.0])),    // r_wrist
        (j(10), j(11)),                   // l_hip
        (j(11), j(12)),                   // l_knee
        (j(12), s([0.10, 0.04, 0.13])),   // l_ankle
        (j(13), j(14)),                   // r_hip
        (j(14), j(15)),                   // r_knee
        (j(15), s([-0.10, 0.04, 0.13])),  // r_ankle
    ]
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> (f64, f64) {
    let ab = math::sub(b, a);
    let t = (math::dot(math::sub(p, a), ab) / math::norm2(ab)).clamp(0.0, 1.0);
    (math::dist(p, math::add(a, math::scale(ab, t))), t)
}

fn capsule_sdf(p: Vec3, a: Vec3, b: Vec3, ra: f64, rb: f64) -> f64 {
    let (d, t) = segment_distance(p, a, b);
    d - (ra + (rb - ra) * t)
}

/// Polynomial smooth minimum.
fn smin(a: f64, b: f64, k: f64) -> f64 {
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b * (1.0 - h) + a * h - k * h * (1.0 - h)
}

fn body_sdf(p: Vec3, scale: f64) -> f64 {
    let k = 0.025 * scale;
    let mut d = f64::INFINITY;
    for (a, b, ra, rb) in CAPSULES_FULL.iter().chain(CAPSULES_FULL_EXTRA.iter()) {
        let c = capsule_sdf(
            p,
            math::scale(*a, scale),
            math::scale(*b, scale),
            ra * scale,
            rb * scale,
        );
        d = if d.is_finite() { smin(d, c, k) } else { c };
    }
    d
}

/// Builds the proxy template deterministically from `seed`.
pub fn build_template(preset: BodyPreset, seed: u64) -> BodyTemplate {
    let scale = preset.scale();
    let bbox = Aabb::new(
        math::scale([-0.90, -0.02, -0.28], scale),
        math::scale([0.90, 1.72, 0.30], scale),
    );
    let volume = build_volume(&bbox, 80, |p| body_sdf(p, scale));
    let rest_mesh = marching_cubes(&volume, 0.0).expect("body sdf has an iso surface");

    let joints: Vec<Vec3> = JOINTS_FULL.iter().map(|&j| math::scale(j, scale)).collect();
    let bones = weight_bones(scale);
    let kernel_h = 0.045 * scale;

    let nv = rest_mesh.vertices.len();
    let mut skin_weights = vec![0.0; nv * NUM_JOINTS];
    for (vi, &v) in rest_mesh.vertices.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = bones
            .iter()
            .enumerate()
            .map(|(j, (a, b))| (segment_distance(v, *a, *b).0, j))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let kept = &dists[..3];
        let mut w: Vec<(usize, f64)> = kept
            .iter()
            .map(|&(d, j)| (j, (-(d / kernel_h).powi(2)).exp()))
            .collect();
        let max_w = w.iter().map(|&(_, x)| x).fold(0.0, f64::max);
        w.retain(|&(_, x)| x >= 0.01 * max_w);
        let sum: f64 = w.iter().map(|&(_, x)| x).sum();
        for (j, x) in w {
            skin_weights[vi * NUM_JOINTS + j] = x / sum;
        }
    }

    // smooth low-frequency displacement modes along vertex normals
    let normals = rest_mesh.smooth_vertex_normals();
    let mut rng = DetRng::new(seed);
    let centers = sample_surface_with_provenance(&rest_mesh, 64, rng.next_u64())
        .expect("template mesh is non-empty");
    let sigma = 0.22 * scale;
    let mut shape_basis = vec![0.0; NUM_SHAPE * nv * 3];
    for b in 0..NUM_SHAPE {
        let picks: Vec<(Vec3, f64)> = (0..5)
            .map(|_| {
                let c = centers[rng.below(centers.len())].position;
                (c, if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
            })
            .collect();
        let mut amp = vec![0.0; nv];
        let mut rms = 0.0;
        for (vi, &v) in rest_mesh.vertices.iter().enumerate() {
            let mut a = 0.0;
            for &(c, sign) in &picks {
                a += sign * (-math::dist2(v, c) / (2.0 * sigma * sigma)).exp();
            }
            amp[vi] = a;
            rms += a * a;
        }
        let rms = (rms / nv as f64).sqrt().max(1e-9);
        // unit shape coefficient displaces the surface by ~1 cm rms (scaled)
        let gain = 0.01 * scale / rms;
        for vi in 0..nv {
            let d = math::scale(normals[vi], amp[vi] * gain);
            for k in 0..3 {
                shape_basis[(b * nv + vi) * 3 + k] = d[k];
            }
        }
    }

    let template = BodyTemplate {
        rest_mesh,
        joints,
        parent: PARENT.to_vec(),
        skin_weights,
        shape_basis,
        subtree_mask: BodyTemplate::compute_subtree_masks(&PARENT),
    };
    template.validate().expect("generated template is valid");
    template
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_well_formed() {
        let t = build_template(BodyPreset::Desk, 7);
        assert!(t.num_vertices() >= 2000 && t.num_vertices() <= 10000, "{} vertices", t.num_vertices());
        // closed surface: every edge shared by exactly two faces
        let mut counts = std::collections::HashMap::new();
        for f in &t.rest_mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 2), "template not watertight");
    }

    #[test]
    fn desk_area_matches_scaled_full() {
        let full = build_template(BodyPreset::Full, 7);
        let desk = build_template(BodyPreset::Desk, 7);
        let full_area = full.rest_mesh.total_area();
        let desk_area = desk.rest_mesh.total_area();
        assert!(full_area > 1.4 && full_area < 2.4, "full area {full_area}");
        let ratio = desk_area / (full_area * 0.32 * 0.32);
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn template_is_deterministic() {
        let a = build_template(BodyPreset::Desk, 3);
        let b = build_template(BodyPreset::Desk, 3);
        assert_eq!(a.rest_mesh.vertices, b.rest_mesh.vertices);
        assert_eq!(a.shape_basis, b.shape_basis);
    }
}
