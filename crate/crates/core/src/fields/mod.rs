//! The three shared conditioned networks (motion, canonical shape, texture),
//! their composition into a world-space 4D SDF / color field over local
//! parts, and the gradient machinery.
//!
//! Per part k the composed SDF at world point x and time T is
//!   x' = to_local(x, frame_k(T));  x* = x' + f_m(x', T | c_m_k);
//!   s_k = f_s(x* | c_s_k)
//! and the field value is the mean over the n selected parts. The motion
//! output is gated by T so the canonical frame (T = 0) is exactly the
//! identity. Spatial inputs are divided by the part radius inside the
//! composition; SDF values and offsets are scaled back to meters.

pub mod mlp;
pub mod texture;

pub use mlp::{Act, InitScheme, Mlp, MlpSpec, MlpTrace};
pub use texture::{TextureNet, TextureSpec, TextureTrace};

use crate::geometry::LocalFrame;
use crate::math::Vec3;
use crate::parts::{PartSet, PartsAtTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite gradient (loss diverged)")]
    NonFiniteGradient,
}

/// Architecture of the three networks plus the shared coordinate scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpecs {
    pub motion: MlpSpec,
    pub shape: MlpSpec,
    pub texture: TextureSpec,
}

impl FieldSpecs {
    /// Full-size architecture: IM-Net-style motion net reduced 4-fold,
    /// 6x256 softplus SDF net with geometric init, 5-block texture decoder.
    pub fn paper(code_dim: usize, part_radius: f64) -> FieldSpecs {
        FieldSpecs {
            motion: MlpSpec {
                code_dim,
                coord_dim: 4,
                hidden: vec![256, 128, 64, 64, 64],
                output_dim: 3,
                skip_layers: vec![1, 2, 3, 4],
                hidden_act: Act::LeakyRelu { alpha: 0.2 },
                init: InitScheme::Standard { final_scale: 0.01 },
                coord_scale: part_radius,
            },
            shape: MlpSpec {
                code_dim,
                coord_dim: 3,
                hidden: vec![256; 6],
                output_dim: 1,
                skip_layers: vec![3],
                hidden_act: Act::Softplus { beta: 100.0 },
                init: InitScheme::Geometric { radius: 0.5 },
                coord_scale: part_radius,
            },
            texture: TextureSpec::paper(code_dim, part_radius),
        }
    }

    /// Reduced widths for desk-scale experiments and tests.
    pub fn desk(code_dim: usize, part_radius: f64) -> FieldSpecs {
        FieldSpecs {
            motion: MlpSpec {
                code_dim,
                coord_dim: 4,
                hidden: vec![48, 24, 24],
                output_dim: 3,
                skip_layers: vec![1, 2],
                hidden_act: Act::LeakyRelu { alpha: 0.2 },
                init: InitScheme::Standard { final_scale: 0.01 },
                coord_scale: part_radius,
            },
            shape: MlpSpec {
                code_dim,
                coord_dim: 3,
                hidden: vec![48, 48, 48],
                output_dim: 1,
                skip_layers: vec![1],
                hidden_act: Act::Softplus { beta: 100.0 },
                init: InitScheme::Geometric { radius: 0.5 },
                coord_scale: part_radius,
            },
            texture: TextureSpec::desk(code_dim, part_radius),
        }
    }
}

/// Flat parameter tensors of the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldWeights {
    pub motion: Vec<f64>,
    pub shape: Vec<f64>,
    pub texture: Vec<f64>,
}

/// Specs, their compiled layer layouts, and the current weights.
#[derive(Clone, Debug)]
pub struct FieldModel {
    pub motion: Mlp,
    pub shape: Mlp,
    pub texture: TextureNet,
    pub weights: FieldWeights,
}

impl FieldModel {
    pub fn new(specs: FieldSpecs, seed: u64) -> FieldModel {
        assert_eq!(
            specs.motion.coord_scale, specs.shape.coord_scale,
            "motion and shape nets must share the coordinate scale"
        );
        let motion = Mlp::new(specs.motion);
        let shape = Mlp::new(specs.shape);
        let texture = TextureNet::new(specs.texture);
        let weights = FieldWeights {
            motion: motion.init_weights(crate::util::derive_seed(&[seed, 1])),
            shape: shape.init_weights(crate::util::derive_seed(&[seed, 2])),
            texture: texture.init_weights(crate::util::derive_seed(&[seed, 3])),
        };
        FieldModel {
            motion,
            shape,
            texture,
            weights,
        }
    }

    pub fn from_weights(specs: FieldSpecs, weights: FieldWeights) -> FieldModel {
        let motion = Mlp::new(specs.motion);
        let shape = Mlp::new(specs.shape);
        let texture = TextureNet::new(specs.texture);
        assert_eq!(weights.motion.len(), motion.n_params);
        assert_eq!(weights.shape.len(), shape.n_params);
        assert_eq!(weights.texture.len(), texture.n_params);
        FieldModel {
            motion,
            shape,
            texture,
            weights,
        }
    }

    pub fn specs(&self) -> FieldSpecs {
        FieldSpecs {
            motion: self.motion.spec.clone(),
            shape: self.shape.spec.clone(),
            texture: self.texture.spec.clone(),
        }
    }

    pub fn coord_scale(&self) -> f64 {
        self.motion.spec.coord_scale
    }
}

/// Gradient accumulator for weights and the latent codes of the touched
/// parts. Merged across parallel chunks in a fixed order.
#[derive(Clone, Debug)]
pub struct FieldGrads {
    pub motion_w: Vec<f64>,
    pub shape_w: Vec<f64>,
    pub texture_w: Vec<f64>,
    pub code_m: Vec<f64>,
    pub code_s: Vec<f64>,
    pub code_t: Vec<f64>,
    pub touched: Vec<bool>,
}

impl FieldGrads {
    pub fn zeros(model: &FieldModel, k: usize, code_dim: usize) -> FieldGrads {
        FieldGrads {
            motion_w: vec![0.0; model.motion.n_params],
            shape_w: vec![0.0; model.shape.n_params],
            texture_w: vec![0.0; model.texture.n_params],
            code_m: vec![0.0; k * code_dim],
            code_s: vec![0.0; k * code_dim],
            code_t: vec![0.0; k * code_dim],
            touched: vec![false; k],
        }
    }

    pub fn merge(&mut self, other: &FieldGrads) {
        crate::util::add_assign(&mut self.motion_w, &other.motion_w);
        crate::util::add_assign(&mut self.shape_w, &other.shape_w);
        crate::util::add_assign(&mut self.texture_w, &other.texture_w);
        crate::util::add_assign(&mut self.code_m, &other.code_m);
        crate::util::add_assign(&mut self.code_s, &other.code_s);
        crate::util::add_assign(&mut self.code_t, &other.code_t);
        for (a, b) in self.touched.iter_mut().zip(&other.touched) {
            *a = *a || *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .motion_w
            .iter_mut()
            .chain(self.shape_w.iter_mut())
            .chain(self.texture_w.iter_mut())
            .chain(self.code_m.iter_mut())
            .chain(self.code_s.iter_mut())
            .chain(self.code_t.iter_mut())
        {
            *v *= s;
        }
    }

    pub fn check_finite(&self) -> Result<(), FieldError> {
        let ok = self
            .motion_w
            .iter()
            .chain(self.shape_w.iter())
            .chain(self.texture_w.iter())
            .chain(self.code_m.iter())
            .chain(self.code_s.iter())
            .chain(self.code_t.iter())
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(FieldError::NonFiniteGradient)
        }
    }
}

/// Per-part cached code contributions for the motion and shape nets.
#[derive(Clone, Debug, Default)]
pub struct PartCodeCaches {
    motion: Vec<Vec<Vec<f64>>>,
    shape: Vec<Vec<Vec<f64>>>,
}

impl PartCodeCaches {
    pub fn build(model: &FieldModel, parts: &PartSet) -> PartCodeCaches {
        let motion = (0..parts.k())
            .map(|k| model.motion.code_cache(&model.weights.motion, parts.code_m_of(k)))
            .collect();
        let shape = (0..parts.k())
            .map(|k| model.shape.code_cache(&model.weights.shape, parts.code_s_of(k)))
            .collect();
        PartCodeCaches { motion, shape }
    }
}

/// Reusable per-worker evaluation buffers.
pub struct FieldWorkspace {
    pub motion_trace: MlpTrace,
    pub shape_trace: MlpTrace,
    pub texture_trace: TextureTrace,
    scratch: mlp::BackScratch,
    motion_coords: [f64; 4],
    motion_tan: [f64; 16],
    shape_coords: [f64; 3],
    shape_tan: [f64; 9],
    n_tan: usize,
    time: f64,
    coords_bar: [f64; 4],
    coords_dot_bar: [f64; 12],
}

impl FieldWorkspace {
    pub fn new(model: &FieldModel) -> FieldWorkspace {
        FieldWorkspace {
            motion_trace: MlpTrace::new(&model.motion),
            shape_trace: MlpTrace::new(&model.shape),
            texture_trace: TextureTrace::new(&model.texture),
            scratch: mlp::BackScratch::default(),
            motion_coords: [0.0; 4],
            motion_tan: [0.0; 16],
            shape_coords: [0.0; 3],
            shape_tan: [0.0; 9],
            n_tan: 0,
            time: 0.0,
            coords_bar: [0.0; 4],
            coords_dot_bar: [0.0; 12],
        }
    }
}

/// SDF of one part at a world point. Value only (no tangents).
pub fn part_sdf(
    model: &FieldModel,
    caches: Option<&PartCodeCaches>,
    parts: &PartSet,
    part: usize,
    frame: &LocalFrame,
    x_world: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> f64 {
    let s = model.coord_scale();
    let x_loc = frame.to_local(x_world);
    ws.motion_coords[0] = x_loc[0] / s;
    ws.motion_coords[1] = x_loc[1] / s;
    ws.motion_coords[2] = x_loc[2] / s;
    ws.motion_coords[3] = t;
    model.motion.forward(
        &model.weights.motion,
        parts.code_m_of(part),
        &ws.motion_coords,
        caches.map(|c| c.motion[part].as_slice()),
        &[],
        0,
        &mut ws.motion_trace,
    );
    let raw = model.motion.output(&ws.motion_trace);
    for i in 0..3 {
        ws.shape_coords[i] = ws.motion_coords[i] + t * raw[i];
    }
    let shape_coords = ws.shape_coords;
    model.shape.forward(
        &model.weights.shape,
        parts.code_s_of(part),
        &shape_coords,
        caches.map(|c| c.shape[part].as_slice()),
        &[],
        0,
        &mut ws.shape_trace,
    );
    s * model.shape.output(&ws.shape_trace)[0]
}

/// SDF and world-space gradient of one part. Leaves the evaluation traces in
/// the workspace for [`part_sdf_backward`].
#[allow(clippy::too_many_arguments)]
pub fn part_sdf_grad(
    model: &FieldModel,
    caches: Option<&PartCodeCaches>,
    parts: &PartSet,
    part: usize,
    frame: &LocalFrame,
    x_world: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> (f64, Vec3) {
    let s = model.coord_scale();
    let x_loc = frame.to_local(x_world);
    ws.n_tan = 3;
    ws.time = t;
    for i in 0..3 {
        ws.motion_coords[i] = x_loc[i] / s;
    }
    ws.motion_coords[3] = t;
    // world-direction tangent seeds: d(x_loc)/d(e_j) = row j of R
    for j in 0..3 {
        let row = frame.rotation.row(j);
        for i in 0..3 {
            ws.motion_tan[j * 4 + i] = row[i] / s;
        }
        ws.motion_tan[j * 4 + 3] = 0.0;
    }
    let motion_tan = ws.motion_tan;
    let motion_coords = ws.motion_coords;
    model.motion.forward(
        &model.weights.motion,
        parts.code_m_of(part),
        &motion_coords,
        caches.map(|c| c.motion[part].as_slice()),
        &motion_tan[..12],
        3,
        &mut ws.motion_trace,
    );
    let raw = model.motion.output(&ws.motion_trace);
    for i in 0..3 {
        ws.shape_coords[i] = ws.motion_coords[i] + t * raw[i];
    }
    for j in 0..3 {
        let raw_dot = model.motion.output_dot(&ws.motion_trace, j);
        for i in 0..3 {
            ws.shape_tan[j * 3 + i] = ws.motion_tan[j * 4 + i] + t * raw_dot[i];
        }
    }
    let shape_coords = ws.shape_coords;
    let shape_tan = ws.shape_tan;
    model.shape.forward(
        &model.weights.shape,
        parts.code_s_of(part),
        &shape_coords,
        caches.map(|c| c.shape[part].as_slice()),
        &shape_tan,
        3,
        &mut ws.shape_trace,
    );
    let val = model.shape.output(&ws.shape_trace)[0];
    let grad = [
        s * model.shape.output_dot(&ws.shape_trace, 0)[0],
        s * model.shape.output_dot(&ws.shape_trace, 1)[0],
        s * model.shape.output_dot(&ws.shape_trace, 2)[0],
    ];
    (s * val, grad)
}

/// Reverse pass through the composition evaluated last by [`part_sdf_grad`]
/// on the same workspace. Accumulates weight gradients (when
/// `train_weights`) and the part's code gradients into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn part_sdf_backward(
    model: &FieldModel,
    parts: &PartSet,
    part: usize,
    sdf_bar: f64,
    grad_bar: Vec3,
    ws: &mut FieldWorkspace,
    grads: &mut FieldGrads,
    train_weights: bool,
) {
    debug_assert_eq!(ws.n_tan, 3);
    let s = model.coord_scale();
    let t = ws.time;
    let cd = parts.code_dim;
    grads.touched[part] = true;
    let val_bar = [s * sdf_bar];
    let val_dot_bar = [s * grad_bar[0], s * grad_bar[1], s * grad_bar[2]];
    let shape_coords = ws.shape_coords;
    let shape_tan = ws.shape_tan;
    {
        let w_grad = if train_weights {
            Some(&mut grads.shape_w[..])
        } else {
            None
        };
        let code_grad = &mut grads.code_s[part * cd..(part + 1) * cd];
        let mut cb = [0.0; 3];
        let mut cdb = [0.0; 9];
        model.shape.backward(
            &model.weights.shape,
            parts.code_s_of(part),
            &shape_coords,
            &shape_tan,
            &val_bar,
            &val_dot_bar,
            &ws.shape_trace,
            w_grad,
            Some(code_grad),
            &mut ws.scratch,
            &mut cb,
            &mut cdb,
        );
        ws.coords_bar[..3].copy_from_slice(&cb);
        ws.coords_dot_bar[..9].copy_from_slice(&cdb);
    }
    // x* = x_loc/s + t * raw, so raw_bar = t * (x*_bar)
    let raw_bar = [
        t * ws.coords_bar[0],
        t * ws.coords_bar[1],
        t * ws.coords_bar[2],
    ];
    let mut raw_dot_bar = [0.0; 9];
    for j in 0..3 {
        for i in 0..3 {
            raw_dot_bar[j * 3 + i] = t * ws.coords_dot_bar[j * 3 + i];
        }
    }
    let motion_coords = ws.motion_coords;
    let motion_tan = ws.motion_tan;
    {
        let w_grad = if train_weights {
            Some(&mut grads.motion_w[..])
        } else {
            None
        };
        let code_grad = &mut grads.code_m[part * cd..(part + 1) * cd];
        let mut cb = [0.0; 4];
        let mut cdb = [0.0; 16];
        model.motion.backward(
            &model.weights.motion,
            parts.code_m_of(part),
            &motion_coords,
            &motion_tan[..12],
            &raw_bar,
            &raw_dot_bar,
            &ws.motion_trace,
            w_grad,
            Some(code_grad),
            &mut ws.scratch,
            &mut cb,
            &mut cdb,
        );
    }
}

/// Color of one part at a world point.
pub fn part_rgb(
    model: &FieldModel,
    parts: &PartSet,
    part: usize,
    frame: &LocalFrame,
    x_world: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> [f64; 3] {
    let x_loc = frame.to_local(x_world);
    let coords = [x_loc[0], x_loc[1], x_loc[2], t];
    model.texture.forward(
        &model.weights.texture,
        parts.code_t_of(part),
        &coords,
        &mut ws.texture_trace,
    )
}

/// Mean SDF over the covering-part selection for a world point. `salt`
/// individualizes the seeded selection per query point.
#[allow(clippy::too_many_arguments)]
pub fn field_sdf(
    model: &FieldModel,
    caches: Option<&PartCodeCaches>,
    parts: &PartSet,
    pat: &PartsAtTime,
    x_world: Vec3,
    n: usize,
    seed: u64,
    salt: u64,
    ws: &mut FieldWorkspace,
) -> f64 {
    let sel = pat.covering_parts(x_world, n, crate::util::derive_seed(&[seed, salt]));
    let mut acc = 0.0;
    for &k in &sel {
        acc += part_sdf(model, caches, parts, k, &pat.frames[k], x_world, pat.time, ws);
    }
    acc / sel.len() as f64
}

/// Mean color over the covering-part selection.
#[allow(clippy::too_many_arguments)]
pub fn field_rgb(
    model: &FieldModel,
    parts: &PartSet,
    pat: &PartsAtTime,
    x_world: Vec3,
    n: usize,
    seed: u64,
    salt: u64,
    ws: &mut FieldWorkspace,
) -> [f64; 3] {
    let sel = pat.covering_parts(x_world, n, crate::util::derive_seed(&[seed, salt]));
    let mut acc = [0.0; 3];
    for &k in &sel {
        let c = part_rgb(model, parts, k, &pat.frames[k], x_world, pat.time, ws);
        for i in 0..3 {
            acc[i] += c[i];
        }
    }
    for v in &mut acc {
        *v /= sel.len() as f64;
    }
    acc
}

/// Motion-model displacement (gated so it vanishes identically at t = 0).
pub fn motion_forward(
    model: &FieldModel,
    c_m: &[f64],
    x_local: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> Vec3 {
    let s = model.coord_scale();
    let coords = [x_local[0] / s, x_local[1] / s, x_local[2] / s, t];
    model
        .motion
        .forward(&model.weights.motion, c_m, &coords, None, &[], 0, &mut ws.motion_trace);
    let raw = model.motion.output(&ws.motion_trace);
    [t * s * raw[0], t * s * raw[1], t * s * raw[2]]
}

/// Displacement plus its Jacobian with respect to (x, T).
pub struct MotionDual {
    pub delta: Vec3,
    /// `jac[i]` = d(delta)/d(input_i) for inputs (x0, x1, x2, T).
    pub jac: [Vec3; 4],
}

pub fn motion_forward_dual(
    model: &FieldModel,
    c_m: &[f64],
    x_local: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> MotionDual {
    let s = model.coord_scale();
    let coords = [x_local[0] / s, x_local[1] / s, x_local[2] / s, t];
    // unit tangents along x (scaled) and T
    let mut tan = [0.0; 16];
    for j in 0..3 {
        tan[j * 4 + j] = 1.0 / s;
    }
    tan[3 * 4 + 3] = 1.0;
    model
        .motion
        .forward(&model.weights.motion, c_m, &coords, None, &tan, 4, &mut ws.motion_trace);
    let raw: Vec3 = {
        let o = model.motion.output(&ws.motion_trace);
        [o[0], o[1], o[2]]
    };
    let mut jac = [[0.0; 3]; 4];
    for j in 0..3 {
        let d = model.motion.output_dot(&ws.motion_trace, j);
        for i in 0..3 {
            jac[j][i] = t * s * d[i];
        }
    }
    let dt = model.motion.output_dot(&ws.motion_trace, 3);
    for i in 0..3 {
        jac[3][i] = s * (raw[i] + t * dt[i]);
    }
    MotionDual {
        delta: [t * s * raw[0], t * s * raw[1], t * s * raw[2]],
        jac,
    }
}

/// Canonical-shape SDF at a canonical-frame point.
pub fn shape_forward(model: &FieldModel, c_s: &[f64], x: Vec3, ws: &mut FieldWorkspace) -> f64 {
    let s = model.coord_scale();
    let coords = [x[0] / s, x[1] / s, x[2] / s];
    model
        .shape
        .forward(&model.weights.shape, c_s, &coords, None, &[], 0, &mut ws.shape_trace);
    s * model.shape.output(&ws.shape_trace)[0]
}

/// SDF plus its spatial gradient.
pub fn shape_forward_dual(
    model: &FieldModel,
    c_s: &[f64],
    x: Vec3,
    ws: &mut FieldWorkspace,
) -> (f64, Vec3) {
    let s = model.coord_scale();
    let coords = [x[0] / s, x[1] / s, x[2] / s];
    let mut tan = [0.0; 9];
    for j in 0..3 {
        tan[j * 3 + j] = 1.0 / s;
    }
    model
        .shape
        .forward(&model.weights.shape, c_s, &coords, None, &tan, 3, &mut ws.shape_trace);
    let val = s * model.shape.output(&ws.shape_trace)[0];
    let grad = [
        s * model.shape.output_dot(&ws.shape_trace, 0)[0],
        s * model.shape.output_dot(&ws.shape_trace, 1)[0],
        s * model.shape.output_dot(&ws.shape_trace, 2)[0],
    ];
    (val, grad)
}

/// Texture color at a local point and time.
pub fn texture_forward(
    model: &FieldModel,
    c_t: &[f64],
    x_local: Vec3,
    t: f64,
    ws: &mut FieldWorkspace,
) -> [f64; 3] {
    let coords = [x_local[0], x_local[1], x_local[2], t];
    model
        .texture
        .forward(&model.weights.texture, c_t, &coords, &mut ws.texture_trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use crate::math;
    use crate::math::Mat3;
    use crate::parts::build_part_set;
    use crate::util::DetRng;

    fn tiny_specs() -> FieldSpecs {
        let mut specs = FieldSpecs::desk(16, 0.05);
        specs.motion.hidden = vec![12, 10];
        specs.motion.skip_layers = vec![1];
        specs.shape.hidden = vec![12, 10];
        specs.shape.skip_layers = vec![1];
        specs.texture.width = 10;
        specs.texture.blocks = 2;
        specs
    }

    fn test_part_set() -> PartSet {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.1, 12, 16);
        let q = Mat3::from_axis_angle([0.0, 0.3, 0.1]);
        let moved = TriMesh::new(
            sphere.vertices.iter().map(|&v| q.mul_vec(v)).collect(),
            sphere.faces.clone(),
        )
        .unwrap();
        let seq = vec![sphere, moved];
        let mut ps = build_part_set(&seq, &[0.0, 1.0], 0.05, 16, 7).unwrap();
        ps.init_codes(0.01, 3);
        ps
    }

    #[test]
    fn motion_gate_vanishes_at_t_zero() {
        let model = FieldModel::new(tiny_specs(), 2);
        let mut ws = FieldWorkspace::new(&model);
        let mut rng = DetRng::new(4);
        for _ in 0..20 {
            let c: Vec<f64> = (0..16).map(|_| 0.1 * rng.normal()).collect();
            let x = [rng.range(-0.05, 0.05), rng.range(-0.05, 0.05), rng.range(-0.05, 0.05)];
            let d = motion_forward(&model, &c, x, 0.0, &mut ws);
            assert_eq!(d, [0.0; 3]);
            let d1 = motion_forward(&model, &c, x, 0.7, &mut ws);
            let d2 = motion_forward(&model, &c, x, 0.7, &mut ws);
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn motion_jacobian_matches_fd() {
        let model = FieldModel::new(tiny_specs(), 6);
        let mut ws = FieldWorkspace::new(&model);
        let mut rng = DetRng::new(9);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let c: Vec<f64> = (0..16).map(|_| 0.2 * rng.normal()).collect();
            let x = [rng.range(-0.04, 0.04), rng.range(-0.04, 0.04), rng.range(-0.04, 0.04)];
            let t = rng.uniform();
            let dual = motion_forward_dual(&model, &c, x, t, &mut ws);
            let h = 1e-5;
            for inp in 0..4 {
                let eval = |delta: f64| -> Vec3 {
                    let mut xx = x;
                    let mut tt = t;
                    if inp < 3 {
                        xx[inp] += delta;
                    } else {
                        tt += delta;
                    }
                    motion_forward(&model, &c, xx, tt, &mut FieldWorkspace::new(&model))
                };
                let fp = eval(h);
                let fm = eval(-h);
                for i in 0..3 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let an = dual.jac[inp][i];
                    let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-8);
                    worst = worst.max(rel);
                    assert!(rel < 1e-4, "input {inp} out {i}: fd {fd} an {an} rel {rel}");
                }
            }
        }
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn geometric_init_zero_set_is_a_sphere() {
        // evaluated at the paper-size shape net since the init property is
        // what downstream training relies on
        let specs = FieldSpecs::desk(128, 0.05);
        let model = FieldModel::new(specs, 11);
        let mut ws = FieldWorkspace::new(&model);
        let rho = 0.5 * 0.05; // geometric radius in meters
        let mut rng = DetRng::new(21);
        let code = vec![0.0; 128];
        let mut ok = 0usize;
        let n = 1000;
        for _ in 0..n {
            let dir = math::normalize([rng.normal(), rng.normal(), rng.normal()]);
            let x = math::scale(dir, rho);
            let sdf = shape_forward(&model, &code, x, &mut ws);
            if sdf.abs() < 0.05 * rho {
                ok += 1;
            }
        }
        assert!(ok as f64 / n as f64 >= 0.95, "only {ok}/{n} near zero");
    }

    #[test]
    fn geometric_init_gradient_is_unit() {
        let specs = FieldSpecs::desk(128, 0.05);
        let model = FieldModel::new(specs, 13);
        let mut ws = FieldWorkspace::new(&model);
        let mut rng = DetRng::new(31);
        let code = vec![0.0; 128];
        let mut ok = 0usize;
        let n = 1000;
        for _ in 0..n {
            let x = [
                rng.range(-0.05, 0.05),
                rng.range(-0.05, 0.05),
                rng.range(-0.05, 0.05),
            ];
            let (_, g) = shape_forward_dual(&model, &code, x, &mut ws);
            let norm = math::norm(g);
            if (0.5..=1.5).contains(&norm) {
                ok += 1;
            }
        }
        assert!(ok as f64 / n as f64 >= 0.95, "only {ok}/{n} unit-ish");
    }

    #[test]
    fn shape_gradient_matches_fd() {
        let model = FieldModel::new(tiny_specs(), 17);
        let mut ws = FieldWorkspace::new(&model);
        let mut rng = DetRng::new(41);
        for _ in 0..100 {
            let c: Vec<f64> = (0..16).map(|_| 0.2 * rng.normal()).collect();
            let x = [rng.range(-0.04, 0.04), rng.range(-0.04, 0.04), rng.range(-0.04, 0.04)];
            let (_, g) = shape_forward_dual(&model, &c, x, &mut ws);
            let h = 1e-5;
            for j in 0..3 {
                let mut xp = x;
                xp[j] += h;
                let mut xm = x;
                xm[j] -= h;
                let fd = (shape_forward(&model, &c, xp, &mut ws)
                    - shape_forward(&model, &c, xm, &mut ws))
                    / (2.0 * h);
                let rel = (fd - g[j]).abs() / (fd.abs() + g[j].abs() + 1e-8);
                assert!(rel < 1e-4, "dir {j}: fd {fd} an {}", g[j]);
            }
        }
    }

    #[test]
    fn field_mean_equals_manual_composition() {
        let model = FieldModel::new(tiny_specs(), 23);
        let mut ps = test_part_set();
        ps.code_dim = 16;
        let pat = ps.at_index(1);
        let mut ws = FieldWorkspace::new(&model);
        let x = [0.02, 0.05, -0.01];
        let n = 4;
        let (seed, salt) = (99, 3);
        let fast = field_sdf(&model, None, &ps, &pat, x, n, seed, salt, &mut ws);
        // manual: same seeded selection, hand-composed per-part pipeline
        let sel = pat.covering_parts(x, n, crate::util::derive_seed(&[seed, salt]));
        let mut acc = 0.0;
        for &k in &sel {
            let x_loc = pat.frames[k].to_local(x);
            let delta = motion_forward(&model, ps.code_m_of(k), x_loc, pat.time, &mut ws);
            let x_star = math::add(x_loc, delta);
            acc += shape_forward(&model, ps.code_s_of(k), x_star, &mut ws);
        }
        let manual = acc / sel.len() as f64;
        assert!((fast - manual).abs() < 1e-12, "fast {fast} manual {manual}");

        // n = 1 equals the single selected part's composed prediction
        let one = field_sdf(&model, None, &ps, &pat, x, 1, seed, salt, &mut ws);
        let sel1 = pat.covering_parts(x, 1, crate::util::derive_seed(&[seed, salt]));
        let x_loc = pat.frames[sel1[0]].to_local(x);
        let delta = motion_forward(&model, ps.code_m_of(sel1[0]), x_loc, pat.time, &mut ws);
        let manual1 = shape_forward(&model, ps.code_s_of(sel1[0]), math::add(x_loc, delta), &mut ws);
        assert!((one - manual1).abs() < 1e-12);
    }

    #[test]
    fn field_rgb_mean_and_bounds() {
        let model = FieldModel::new(tiny_specs(), 29);
        let ps = test_part_set();
        let pat = ps.at_index(0);
        let mut ws = FieldWorkspace::new(&model);
        let x = [0.03, -0.02, 0.04];
        let rgb = field_rgb(&model, &ps, &pat, x, 4, 7, 1, &mut ws);
        assert!(rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        let sel = pat.covering_parts(x, 4, crate::util::derive_seed(&[7, 1]));
        let mut acc = [0.0; 3];
        for &k in &sel {
            let c = part_rgb(&model, &ps, k, &pat.frames[k], x, pat.time, &mut ws);
            for i in 0..3 {
                acc[i] += c[i];
            }
        }
        for i in 0..3 {
            assert!((rgb[i] - acc[i] / sel.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn composed_backward_matches_fd() {
        let model = FieldModel::new(tiny_specs(), 37);
        let ps = test_part_set();
        let pat = ps.at_index(1);
        let mut ws = FieldWorkspace::new(&model);
        let part = 0usize;
        let x = math::add(pat.frames[part].center, [0.01, -0.02, 0.015]);
        let t = pat.time;

        // loss = f^2 + (|grad| - 1)^2 exercises value and tangent paths
        let loss_of = |model: &FieldModel, ps: &PartSet| -> f64 {
            let mut w = FieldWorkspace::new(model);
            let (f, g) = part_sdf_grad(model, None, ps, part, &pat.frames[part], x, t, &mut w);
            f * f + (math::norm(g) - 1.0).powi(2)
        };

        let (f, g) = part_sdf_grad(&model, None, &ps, part, &pat.frames[part], x, t, &mut ws);
        let gn = math::norm(g);
        let sdf_bar = 2.0 * f;
        let g_bar = math::scale(g, 2.0 * (gn - 1.0) / gn);
        let mut grads = FieldGrads::zeros(&model, ps.k(), ps.code_dim);
        part_sdf_backward(&model, &ps, part, sdf_bar, g_bar, &mut ws, &mut grads, true);
        grads.check_finite().unwrap();
        assert!(grads.touched[part]);

        let h = 1e-5;
        let mut idx = DetRng::new(5);
        // motion weights (second-order path), shape weights, both codes
        for _ in 0..20 {
            let i = idx.below(model.motion.n_params);
            let mut mp = model.clone();
            mp.weights.motion[i] += h;
            let mut mm = model.clone();
            mm.weights.motion[i] -= h;
            let fd = (loss_of(&mp, &ps) - loss_of(&mm, &ps)) / (2.0 * h);
            let an = grads.motion_w[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-6);
            assert!(rel < 1e-3, "motion w {i}: fd {fd} an {an}");
        }
        for _ in 0..20 {
            let i = idx.below(model.shape.n_params);
            let mut mp = model.clone();
            mp.weights.shape[i] += h;
            let mut mm = model.clone();
            mm.weights.shape[i] -= h;
            let fd = (loss_of(&mp, &ps) - loss_of(&mm, &ps)) / (2.0 * h);
            let an = grads.shape_w[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-6);
            assert!(rel < 1e-3, "shape w {i}: fd {fd} an {an}");
        }
        for c in 0..ps.code_dim {
            let mut pp = ps.clone();
            pp.code_m[part * ps.code_dim + c] += h;
            let mut pm = ps.clone();
            pm.code_m[part * ps.code_dim + c] -= h;
            let fd = (loss_of(&model, &pp) - loss_of(&model, &pm)) / (2.0 * h);
            let an = grads.code_m[part * ps.code_dim + c];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-6);
            assert!(rel < 1e-3, "code_m {c}: fd {fd} an {an}");
        }
        for c in 0..ps.code_dim {
            let mut pp = ps.clone();
            pp.code_s[part * ps.code_dim + c] += h;
            let mut pm = ps.clone();
            pm.code_s[part * ps.code_dim + c] -= h;
            let fd = (loss_of(&model, &pp) - loss_of(&model, &pm)) / (2.0 * h);
            let an = grads.code_s[part * ps.code_dim + c];
            let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-6);
            assert!(rel < 1e-3, "code_s {c}: fd {fd} an {an}");
        }
    }

    #[test]
    fn code_caches_do_not_change_results() {
        let model = FieldModel::new(tiny_specs(), 43);
        let ps = test_part_set();
        let pat = ps.at_index(0);
        let caches = PartCodeCaches::build(&model, &ps);
        let mut ws = FieldWorkspace::new(&model);
        let mut rng = DetRng::new(3);
        for salt in 0..20 {
            let x = [rng.range(-0.1, 0.1), rng.range(-0.1, 0.1), rng.range(-0.1, 0.1)];
            let a = field_sdf(&model, None, &ps, &pat, x, 4, 11, salt, &mut ws);
            let b = field_sdf(&model, Some(&caches), &ps, &pat, x, 4, 11, salt, &mut ws);
            assert!((a - b).abs() < 1e-12);
        }
    }
}
