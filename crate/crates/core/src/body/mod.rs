//! Simplified skinned inner-body model: fixed-topology template, 16-joint
//! skeleton, linear blend skinning with analytic parameter gradients,
//! Gaussian parameter perturbation and per-frame bounding boxes.

mod io;
mod proxy;

pub use io::{read_params, read_template, write_params, write_template};
pub use proxy::{build_template, joint_index, BodyPreset, JOINT_NAMES};

use crate::geometry::{Aabb, GeometryError, TriMesh};
use crate::math::{self, Affine, Mat3, Vec3};
use crate::util::DetRng;
use thiserror::Error;

pub const NUM_JOINTS: usize = 16;
pub const NUM_SHAPE: usize = 10;

/// Perturbation scale for shape parameters.
pub const LAMBDA_BETA: f64 = 0.05;
/// Perturbation scale for pose parameters.
pub const LAMBDA_THETA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty mesh sequence")]
    EmptyMesh,
    #[error("meshes do not share the template topology")]
    TopologyMismatch,
    #[error("template is malformed: {0}")]
    BadTemplate(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

/// Fixed-topology skinned template. Skin weights are stored sparsely (at
/// most a few joints influence each vertex); shape modes displace rest
/// vertices before skinning. Joints do not move with shape.
#[derive(Clone, Debug)]
pub struct BodyTemplate {
    pub rest_mesh: TriMesh,
    /// Rest joint positions, length [`NUM_JOINTS`].
    pub joints: Vec<Vec3>,
    /// Parent joint index, -1 for the pelvis root.
    pub parent: Vec<i32>,
    /// Dense row-major V x J skinning weights (rows sum to 1).
    pub skin_weights: Vec<f64>,
    /// B x V x 3 shape displacement modes.
    pub shape_basis: Vec<f64>,
    /// Bitmask of the joint subtree rooted at each joint (joint j included).
    pub subtree_mask: Vec<u32>,
}

impl BodyTemplate {
    pub fn validate(&self) -> Result<(), BodyError> {
        let v = self.rest_mesh.vertices.len();
        let j = self.joints.len();
        if j != NUM_JOINTS || self.parent.len() != j {
            return Err(BodyError::BadTemplate(format!("expected {NUM_JOINTS} joints")));
        }
        if self.skin_weights.len() != v * j {
            return Err(BodyError::BadTemplate("skin weight shape".into()));
        }
        if self.shape_basis.len() != NUM_SHAPE * v * 3 {
            return Err(BodyError::BadTemplate("shape basis shape".into()));
        }
        for row in 0..v {
            let w = &self.skin_weights[row * j..(row + 1) * j];
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || w.iter().any(|&x| x < 0.0) {
                return Err(BodyError::BadTemplate(format!(
                    "skin weights of vertex {row} invalid (sum {sum})"
                )));
            }
        }
        // parent pointers must form a tree rooted at joint 0
        if self.parent[0] != -1 {
            return Err(BodyError::BadTemplate("joint 0 must be the root".into()));
        }
        for (i, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= i {
                return Err(BodyError::BadTemplate(format!(
                    "parent of joint {i} must precede it"
                )));
            }
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.rest_mesh.vertices.len()
    }

    /// Rest vertices displaced by the shape basis.
    pub fn shaped_rest(&self, shape: &[f64]) -> Result<Vec<Vec3>, BodyError> {
        if shape.len() != NUM_SHAPE {
            return Err(BodyError::DimensionMismatch(format!(
                "shape has {} coefficients, expected {NUM_SHAPE}",
                shape.len()
            )));
        }
        let v = self.num_vertices();
        let mut out = self.rest_mesh.vertices.clone();
        for (b, &coef) in shape.iter().enumerate() {
            if coef == 0.0 {
                continue;
            }
            let mode = &self.shape_basis[b * v * 3..(b + 1) * v * 3];
            for (i, vert) in out.iter_mut().enumerate() {
                for k in 0..3 {
                    vert[k] += coef * mode[i * 3 + k];
                }
            }
        }
        Ok(out)
    }

    fn compute_subtree_masks(parent: &[i32]) -> Vec<u32> {
        let j = parent.len();
        let mut mask = vec![0u32; j];
        // children come after parents, so a reverse sweep accumulates subtrees
        for i in (0..j).rev() {
            mask[i] |= 1 << i;
            if parent[i] >= 0 {
                let p = parent[i] as usize;
                let m = mask[i];
                mask[p] |= m;
            }
        }
        mask
    }
}

/// Shape coefficients plus per-frame axis-angle poses and translations.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BodyParams {
    pub shape: Vec<f64>,
    /// Per frame: 3 axis-angle components per joint, length 3 * NUM_JOINTS.
    pub poses: Vec<Vec<f64>>,
    pub translations: Vec<Vec3>,
}

impl BodyParams {
    pub fn rest(frames: usize) -> BodyParams {
        BodyParams {
            shape: vec![0.0; NUM_SHAPE],
            poses: vec![vec![0.0; 3 * NUM_JOINTS]; frames],
            translations: vec![[0.0; 3]; frames],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        if self.shape.len() != NUM_SHAPE {
            return Err(BodyError::DimensionMismatch("shape length".into()));
        }
        if self.poses.is_empty() || self.poses.len() != self.translations.len() {
            return Err(BodyError::DimensionMismatch("pose/translation frames".into()));
        }
        for p in &self.poses {
            if p.len() != 3 * NUM_JOINTS {
                return Err(BodyError::DimensionMismatch("pose length".into()));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(BodyError::DimensionMismatch("non-finite pose".into()));
            }
        }
        Ok(())
    }
}

/// Global skinning transforms `M_j` (rest -> posed) for one frame; identity
/// when all angles are zero.
pub fn skinning_transforms(template: &BodyTemplate, pose: &[f64]) -> Vec<Affine> {
    let j = template.joints.len();
    debug_assert_eq!(pose.len(), 3 * j);
    let mut global: Vec<Affine> = Vec::with_capacity(j);
    for i in 0..j {
        let rot = Mat3::from_axis_angle([pose[3 * i], pose[3 * i + 1], pose[3 * i + 2]]);
        let offset = if template.parent[i] < 0 {
            template.joints[i]
        } else {
            math::sub(template.joints[i], template.joints[template.parent[i] as usize])
        };
        let local = Affine::translation(offset).compose(&Affine::new(rot, [0.0; 3]));
        let g = if template.parent[i] < 0 {
            local
        } else {
            global[template.parent[i] as usize].compose(&local)
        };
        global.push(g);
    }
    global
        .iter()
        .enumerate()
        .map(|(i, g)| g.compose(&Affine::translation(math::scale(template.joints[i], -1.0))))
        .collect()
}

/// Poses the template: shape displacement, linear blend skinning, global
/// translation. Output topology equals the template topology bit for bit.
pub fn pose_body(
    template: &BodyTemplate,
    shape: &[f64],
    pose: &[f64],
    translation: Vec3,
) -> Result<TriMesh, BodyError> {
    if pose.len() != 3 * template.joints.len() {
        return Err(BodyError::DimensionMismatch(format!(
            "pose has {} components, expected {}",
            pose.len(),
            3 * template.joints.len()
        )));
    }
    let rest = template.shaped_rest(shape)?;
    let transforms = skinning_transforms(template, pose);
    let j = template.joints.len();
    let vertices: Vec<Vec3> = rest
        .iter()
        .enumerate()
        .map(|(vi, &v)| {
            let w = &template.skin_weights[vi * j..(vi + 1) * j];
            let mut p = [0.0; 3];
            for (ji, &wj) in w.iter().enumerate() {
                if wj != 0.0 {
                    p = math::add(p, math::scale(transforms[ji].apply(v), wj));
                }
            }
            math::add(p, translation)
        })
        .collect();
    Ok(TriMesh::new(vertices, template.rest_mesh.faces.clone())?)
}

/// Poses every frame of a parameter set.
pub fn pose_sequence(template: &BodyTemplate, params: &BodyParams) -> Result<Vec<TriMesh>, BodyError> {
    params.validate()?;
    params
        .poses
        .iter()
        .zip(&params.translations)
        .map(|(pose, &t)| pose_body(template, &params.shape, pose, t))
        .collect()
}

/// Adds Gaussian noise to shape and pose parameters:
/// `beta += 0.05 * sigma * mu`, `theta += 0.01 * sigma * mu`, `mu ~ N(0,1)`.
/// Translations are left untouched.
pub fn perturb_params(params: &BodyParams, sigma: f64, rng_seed: u64) -> BodyParams {
    assert!(sigma >= 0.0);
    let mut rng = DetRng::new(rng_seed);
    let mut out = params.clone();
    for b in &mut out.shape {
        *b += LAMBDA_BETA * sigma * rng.normal();
    }
    for pose in &mut out.poses {
        for t in pose.iter_mut() {
            *t += LAMBDA_THETA * sigma * rng.normal();
        }
    }
    out
}

/// Per-frame AABB of the body vertices expanded by `padding` on every axis.
pub fn body_bbox(body_seq: &[TriMesh], padding: f64) -> Result<Vec<Aabb>, BodyError> {
    if body_seq.is_empty() {
        return Err(BodyError::EmptyMesh);
    }
    body_seq
        .iter()
        .map(|m| {
            Aabb::from_points(&m.vertices)
                .map(|b| b.padded(padding))
                .ok_or(BodyError::EmptyMesh)
        })
        .collect()
}

/// Gradients of a scalar loss with respect to one frame's body parameters,
/// given per-vertex position adjoints.
#[derive(Clone, Debug)]
pub struct LbsGrad {
    pub shape: Vec<f64>,
    pub pose: Vec<f64>,
    pub translation: Vec3,
}

/// Derivative of the Rodrigues rotation with respect to axis-angle
/// component `c` (Gallego-Yezzi closed form).
pub fn rotation_derivative(w: Vec3, c: usize) -> Mat3 {
    let theta2 = math::norm2(w);
    let mut e = [0.0; 3];
    e[c] = 1.0;
    if theta2 < 1e-16 {
        return Mat3::skew(e);
    }
    let r = Mat3::from_axis_angle(w);
    // (I - R) e_c
    let ime = math::sub(e, r.mul_vec(e));
    let v = math::add(math::scale(w, w[c]), math::cross(w, ime));
    Mat3::skew(math::scale(v, 1.0 / theta2)).mul_mat(&r)
}

/// Reverse-mode LBS: accumulates d(loss)/d(shape, pose, translation) for one
/// frame from per-vertex adjoints `vertex_bar`. Only vertices listed in
/// `vertex_ids` contribute (pass all ids for a dense pull-back).
pub fn lbs_backward(
    template: &BodyTemplate,
    shape: &[f64],
    pose: &[f64],
    vertex_ids: &[usize],
    vertex_bar: &[Vec3],
) -> Result<LbsGrad, BodyError> {
    assert_eq!(vertex_ids.len(), vertex_bar.len());
    let j = template.joints.len();
    let v = template.num_vertices();
    let rest = template.shaped_rest(shape)?;
    let transforms = skinning_transforms(template, pose);

    // posed joint positions and world-space rotation generators per (joint, c)
    let mut pivots = Vec::with_capacity(j);
    let mut gens: Vec<[Mat3; 3]> = Vec::with_capacity(j);
    for i in 0..j {
        // A_j = G_parent ∘ Trans(offset); its translation is the posed pivot
        let offset = if template.parent[i] < 0 {
            template.joints[i]
        } else {
            math::sub(template.joints[i], template.joints[template.parent[i] as usize])
        };
        let parent_g = if template.parent[i] < 0 {
            Affine::IDENTITY
        } else {
            // reconstruct G_parent from the skinning transform M_parent
            let p = template.parent[i] as usize;
            transforms[p].compose(&Affine::translation(template.joints[p]))
        };
        let a = parent_g.compose(&Affine::translation(offset));
        pivots.push(a.t);
        let w = [pose[3 * i], pose[3 * i + 1], pose[3 * i + 2]];
        let rot = Mat3::from_axis_angle(w);
        let rot_t = rot.transpose();
        let mut g = [Mat3::IDENTITY; 3];
        for (c, slot) in g.iter_mut().enumerate() {
            let dr = rotation_derivative(w, c);
            // L = Ra * dR * R^T * Ra^T expressed around the posed pivot
            *slot = a
                .lin
                .mul_mat(&dr)
                .mul_mat(&rot_t)
                .mul_mat(&a.lin.transpose());
        }
        gens.push(g);
    }

    let mut grad = LbsGrad {
        shape: vec![0.0; NUM_SHAPE],
        pose: vec![0.0; 3 * j],
        translation: [0.0; 3],
    };

    for (&vi, &bar) in vertex_ids.iter().zip(vertex_bar) {
        grad.translation = math::add(grad.translation, bar);
        let weights = &template.skin_weights[vi * j..(vi + 1) * j];
        // per-joint posed contributions of this vertex
        let mut contrib = [[0.0; 3]; NUM_JOINTS];
        let mut blend_lin = Mat3 { m: [[0.0; 3]; 3] };
        for (ji, &wj) in weights.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            contrib[ji] = math::scale(transforms[ji].apply(rest[vi]), wj);
            blend_lin = blend_lin.add_mat(&transforms[ji].lin.scale_by(wj));
        }
        // shape gradient: bar^T * blend_lin * mode
        let bt = blend_lin.tr_mul_vec(bar);
        for b in 0..NUM_SHAPE {
            let m = &template.shape_basis[(b * v + vi) * 3..(b * v + vi) * 3 + 3];
            grad.shape[b] += bt[0] * m[0] + bt[1] * m[1] + bt[2] * m[2];
        }
        // pose gradient: rotation about each posed pivot applied to the
        // subtree-weighted posed position
        for a in 0..j {
            let mask = template.subtree_mask[a];
            let mut u = [0.0; 3];
            let mut wsum = 0.0;
            let mut any = false;
            for (ji, &wj) in weights.iter().enumerate() {
                if wj != 0.0 && (mask >> ji) & 1 == 1 {
                    u = math::add(u, contrib[ji]);
                    wsum += wj;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let centered = math::sub(u, math::scale(pivots[a], wsum));
            for c in 0..3 {
                grad.pose[3 * a + c] += math::dot(bar, gens[a][c].mul_vec(centered));
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> BodyTemplate {
        build_template(BodyPreset::Desk, 1234)
    }

    #[test]
    fn rest_pose_is_identity() {
        let t = template();
        let params = BodyParams::rest(1);
        let posed = pose_body(&t, &params.shape, &params.poses[0], [0.0; 3]).unwrap();
        for (a, b) in posed.vertices.iter().zip(&t.rest_mesh.vertices) {
            assert!(math::dist(*a, *b) < 1e-12);
        }
        assert_eq!(posed.faces, t.rest_mesh.faces);
    }

    #[test]
    fn pure_translation_shifts_everything() {
        let t = template();
        let params = BodyParams::rest(1);
        let shift = [0.3, -0.1, 0.2];
        let posed = pose_body(&t, &params.shape, &params.poses[0], shift).unwrap();
        for (a, b) in posed.vertices.iter().zip(&t.rest_mesh.vertices) {
            assert!(math::dist(*a, math::add(*b, shift)) < 1e-12);
        }
    }

    #[test]
    fn elbow_rotation_moves_only_its_subtree() {
        let t = template();
        let elbow = proxy::joint_index("l_elbow");
        let mut pose = vec![0.0; 3 * NUM_JOINTS];
        pose[3 * elbow + 2] = std::f64::consts::FRAC_PI_2;
        let posed = pose_body(&t, &vec![0.0; NUM_SHAPE], &pose, [0.0; 3]).unwrap();

        let mask = t.subtree_mask[elbow];
        let j = t.joints.len();
        let rot = Mat3::from_axis_angle([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let pivot = t.joints[elbow];
        let mut saw_rigid_vertex = false;
        for (vi, (a, b)) in posed.vertices.iter().zip(&t.rest_mesh.vertices).enumerate() {
            let w = &t.skin_weights[vi * j..(vi + 1) * j];
            let subtree_weight: f64 = (0..j)
                .filter(|ji| (mask >> ji) & 1 == 1)
                .map(|ji| w[ji])
                .sum();
            if subtree_weight == 0.0 {
                assert!(math::dist(*a, *b) < 1e-12, "vertex {vi} outside subtree moved");
            } else if (subtree_weight - 1.0).abs() < 1e-12 {
                // fully-weighted vertices must follow the rigid rotation about the elbow
                let expected = math::add(rot.mul_vec(math::sub(*b, pivot)), pivot);
                assert!(math::dist(*a, expected) < 1e-9, "vertex {vi} not rigid");
                saw_rigid_vertex = true;
            }
        }
        assert!(saw_rigid_vertex, "no fully elbow-weighted vertex found");
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let params = BodyParams::rest(3);
        let p = perturb_params(&params, 0.0, 9);
        assert_eq!(p, params);
    }

    #[test]
    fn perturb_statistics_match_lambdas() {
        let params = BodyParams::rest(2);
        // sigma = 3: beta std should be 0.15; sigma = 5: theta std 0.05
        let mut beta_sq = 0.0;
        let mut beta_n = 0usize;
        for seed in 0..1000 {
            let p = perturb_params(&params, 3.0, seed);
            for b in &p.shape {
                beta_sq += b * b;
                beta_n += 1;
            }
        }
        let beta_std = (beta_sq / beta_n as f64).sqrt();
        assert!((beta_std - 0.15).abs() < 0.01, "beta std {beta_std}");

        let mut th_sq = 0.0;
        let mut th_n = 0usize;
        for seed in 0..200 {
            let p = perturb_params(&params, 5.0, seed);
            for pose in &p.poses {
                for t in pose {
                    th_sq += t * t;
                    th_n += 1;
                }
            }
        }
        let th_std = (th_sq / th_n as f64).sqrt();
        assert!((th_std - 0.05).abs() < 0.005, "theta std {th_std}");
    }

    #[test]
    fn bbox_padding() {
        let cube = TriMesh::box_mesh([0.0; 3], [1.0; 3]);
        let boxes = body_bbox(&[cube], 0.1).unwrap();
        assert!(math::dist(boxes[0].min, [-0.1; 3]) < 1e-15);
        assert!(math::dist(boxes[0].max, [1.1; 3]) < 1e-15);
        let tight = body_bbox(&[TriMesh::box_mesh([0.0; 3], [1.0; 3])], 0.0).unwrap();
        assert_eq!(tight[0], Aabb::new([0.0; 3], [1.0; 3]));
    }

    #[test]
    fn rotation_derivative_matches_fd() {
        let w = [0.4, -0.2, 0.7];
        let h = 1e-6;
        for c in 0..3 {
            let analytic = rotation_derivative(w, c);
            let mut wp = w;
            wp[c] += h;
            let mut wm = w;
            wm[c] -= h;
            let fd = Mat3::from_axis_angle(wp)
                .add_mat(&Mat3::from_axis_angle(wm).scale_by(-1.0))
                .scale_by(1.0 / (2.0 * h));
            assert!(analytic.max_abs_diff(&fd) < 1e-8, "component {c}");
        }
        // zero-pose limit
        let analytic = rotation_derivative([0.0; 3], 1);
        assert!(analytic.max_abs_diff(&Mat3::skew([0.0, 1.0, 0.0])) < 1e-12);
    }

    #[test]
    fn lbs_backward_matches_fd() {
        let t = template();
        let mut rng = DetRng::new(77);
        let mut pose = vec![0.0; 3 * NUM_JOINTS];
        for p in pose.iter_mut() {
            *p = rng.range(-0.3, 0.3);
        }
        let shape: Vec<f64> = (0..NUM_SHAPE).map(|_| rng.range(-1.0, 1.0)).collect();
        let translation = [0.05, -0.02, 0.01];

        // random linear loss: L = sum_v g_v . x_v over a vertex subset
        let ids: Vec<usize> = (0..40).map(|_| rng.below(t.num_vertices())).collect();
        let bars: Vec<Vec3> = ids
            .iter()
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect();
        let loss = |shape: &[f64], pose: &[f64], tr: Vec3| -> f64 {
            let mesh = pose_body(&t, shape, pose, tr).unwrap();
            ids.iter()
                .zip(&bars)
                .map(|(&vi, g)| math::dot(mesh.vertices[vi], *g))
                .sum()
        };

        let grad = lbs_backward(&t, &shape, &pose, &ids, &bars).unwrap();
        let h = 1e-6;
        for b in 0..NUM_SHAPE {
            let mut sp = shape.clone();
            sp[b] += h;
            let mut sm = shape.clone();
            sm[b] -= h;
            let fd = (loss(&sp, &pose, translation) - loss(&sm, &pose, translation)) / (2.0 * h);
            assert!(
                (fd - grad.shape[b]).abs() < 1e-5 * (1.0 + fd.abs()),
                "shape {b}: fd {fd} analytic {}",
                grad.shape[b]
            );
        }
        for c in 0..3 * NUM_JOINTS {
            let mut pp = pose.clone();
            pp[c] += h;
            let mut pm = pose.clone();
            pm[c] -= h;
            let fd = (loss(&shape, &pp, translation) - loss(&shape, &pm, translation)) / (2.0 * h);
            assert!(
                (fd - grad.pose[c]).abs() < 1e-5 * (1.0 + fd.abs()),
                "pose {c}: fd {fd} analytic {}",
                grad.pose[c]
            );
        }
        let g_sum: Vec3 = bars.iter().fold([0.0; 3], |acc, g| math::add(acc, *g));
        assert!(math::dist(grad.translation, g_sum) < 1e-12);
    }

    #[test]
    fn posed_topology_is_identical_across_frames() {
        let t = template();
        let mut params = BodyParams::rest(3);
        params.poses[1][5] = 0.4;
        params.poses[2][8] = -0.3;
        let seq = pose_sequence(&t, &params).unwrap();
        for m in &seq[1..] {
            assert_eq!(m.faces, seq[0].faces);
        }
    }
}
