//! Supervision sampling and loss terms: the IGR surface and Eikonal losses,
//! latent regularization, L1 color loss, the asymmetric inner-body penalty,
//! observation losses, and the weighted totals for each optimization mode.
//!
//! The per-point terms come in (value, adjoint) pairs so the training loop
//! and the standalone loss evaluators share one definition.

use crate::geometry::{Aabb, GeometryError, OrientedPointCloud, TriMesh};
use crate::math::{self, Vec3};
use crate::util::DetRng;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty input")]
    EmptyInput,
    #[error("batch size must be at least 8 (got {0})")]
    BatchTooSmall(usize),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Query points for one frame: on-surface points with normals (and colors
/// when available), near-surface points, and free-space points inside the
/// padded body box.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub surface: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub near: Vec<Vec3>,
    pub free: Vec<Vec3>,
    pub time: f64,
}

impl SampleBatch {
    pub fn off_surface_count(&self) -> usize {
        self.near.len() + self.free.len()
    }
}

/// Loss weights (lambda_1, lambda_2, lambda_3).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossWeights {
    /// Training / fitting: surface, Eikonal, latent regularization.
    pub fn train() -> LossWeights {
        LossWeights {
            l1: 1.0,
            l2: 0.1,
            l3: 1e-3,
        }
    }

    /// Refining: body penalty, observation, parameter regularization.
    pub fn refine() -> LossWeights {
        LossWeights {
            l1: 1.0,
            l2: 100.0,
            l3: 1e-3,
        }
    }
}

/// Per-axis standard deviation of the near-surface displacement.
pub const NEAR_SURFACE_STD: f64 = 0.01;

fn near_and_free(
    surface: &[Vec3],
    bbox: &Aabb,
    m: usize,
    rng: &mut DetRng,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let near: Vec<Vec3> = surface
        .iter()
        .map(|p| {
            [
                p[0] + NEAR_SURFACE_STD * rng.normal(),
                p[1] + NEAR_SURFACE_STD * rng.normal(),
                p[2] + NEAR_SURFACE_STD * rng.normal(),
            ]
        })
        .collect();
    let free: Vec<Vec3> = (0..m / 8)
        .map(|_| {
            [
                rng.range(bbox.min[0], bbox.max[0]),
                rng.range(bbox.min[1], bbox.max[1]),
                rng.range(bbox.min[2], bbox.max[2]),
            ]
        })
        .collect();
    (near, free)
}

/// Training-time batch: surface points sampled from the ground-truth mesh.
pub fn sample_batch_from_mesh(
    mesh: &TriMesh,
    bbox: &Aabb,
    m: usize,
    time: f64,
    rng_seed: u64,
) -> Result<SampleBatch, ObjectiveError> {
    if m < 8 {
        return Err(ObjectiveError::BatchTooSmall(m));
    }
    let cloud = crate::geometry::sample_surface(mesh, m, rng_seed)?;
    let mut rng = DetRng::from_parts(&[rng_seed, 0x6261746368]);
    let (near, free) = near_and_free(&cloud.points, bbox, m, &mut rng);
    Ok(SampleBatch {
        surface: cloud.points,
        normals: cloud.normals,
        colors: cloud.colors,
        near,
        free,
        time,
    })
}

/// Test-time batch: surface points chosen randomly from the observed cloud
/// (with replacement when the cloud is smaller than `m`).
pub fn sample_batch_from_cloud(
    cloud: &OrientedPointCloud,
    bbox: &Aabb,
    m: usize,
    rng_seed: u64,
) -> Result<SampleBatch, ObjectiveError> {
    if m < 8 {
        return Err(ObjectiveError::BatchTooSmall(m));
    }
    if cloud.is_empty() {
        return Err(ObjectiveError::EmptyInput);
    }
    let mut rng = DetRng::from_parts(&[rng_seed, 0x6261746368]);
    let mut surface = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(m));
    for _ in 0..m {
        let i = rng.below(cloud.len());
        surface.push(cloud.points[i]);
        normals.push(cloud.normals[i]);
        if let (Some(cs), Some(src)) = (&mut colors, &cloud.colors) {
            cs.push(src[i]);
        }
    }
    let (near, free) = near_and_free(&surface, bbox, m, &mut rng);
    Ok(SampleBatch {
        surface,
        normals,
        colors,
        near,
        free,
        time: cloud.frame_time,
    })
}

/// Surface term of one point: |f| + ||grad f - n||.
pub fn surface_term(sdf: f64, grad: Vec3, normal: Vec3) -> f64 {
    sdf.abs() + math::dist(grad, normal)
}

/// Adjoints (d term / d sdf, d term / d grad) of [`surface_term`].
pub fn surface_term_bar(sdf: f64, grad: Vec3, normal: Vec3) -> (f64, Vec3) {
    let sdf_bar = if sdf > 0.0 {
        1.0
    } else if sdf < 0.0 {
        -1.0
    } else {
        0.0
    };
    let d = math::sub(grad, normal);
    let n = math::norm(d);
    let g_bar = if n > 1e-12 {
        math::scale(d, 1.0 / n)
    } else {
        [0.0; 3]
    };
    (sdf_bar, g_bar)
}

/// Eikonal term of one point: (||grad f|| - 1)^2.
pub fn eikonal_term(grad: Vec3) -> f64 {
    let n = math::norm(grad);
    (n - 1.0) * (n - 1.0)
}

/// Adjoint (d term / d grad) of [`eikonal_term`].
pub fn eikonal_term_bar(grad: Vec3) -> Vec3 {
    let n = math::norm(grad);
    if n > 1e-12 {
        math::scale(grad, 2.0 * (n - 1.0) / n)
    } else {
        [0.0; 3]
    }
}

/// Inner-body penalty of one vertex: |f| outside, |f| / eta inside.
pub fn refine_body_term(sdf: f64, eta: f64) -> f64 {
    if sdf >= 0.0 {
        sdf
    } else {
        -sdf / eta
    }
}

/// Adjoint of [`refine_body_term`].
pub fn refine_body_term_bar(sdf: f64, eta: f64) -> f64 {
    if sdf >= 0.0 {
        1.0
    } else {
        -1.0 / eta
    }
}

/// A field that yields SDF value and spatial gradient at a query point.
/// The `salt` keys any seeded internal choice (part selection).
pub trait SdfField: Sync {
    fn eval_grad(&self, x: Vec3, salt: u64) -> (f64, Vec3);
}

impl<F: Fn(Vec3) -> (f64, Vec3) + Sync> SdfField for F {
    fn eval_grad(&self, x: Vec3, salt: u64) -> (f64, Vec3) {
        let _ = salt;
        self(x)
    }
}

/// Mean surface loss over the batch.
pub fn loss_surface(batch: &SampleBatch, field: &impl SdfField) -> f64 {
    if batch.surface.is_empty() {
        return 0.0;
    }
    let terms = crate::util::par_chunks(batch.surface.len(), 256, |range| {
        let partial: Vec<f64> = range
            .map(|i| {
                let (f, g) = field.eval_grad(batch.surface[i], i as u64);
                surface_term(f, g, batch.normals[i])
            })
            .collect();
        crate::util::tree_sum(&partial)
    });
    crate::util::tree_sum(&terms) / batch.surface.len() as f64
}

/// Mean Eikonal loss over the off-surface points (near-surface plus free).
pub fn loss_eikonal(batch: &SampleBatch, field: &impl SdfField) -> f64 {
    let pts: Vec<Vec3> = batch.near.iter().chain(batch.free.iter()).copied().collect();
    if pts.is_empty() {
        return 0.0;
    }
    let terms = crate::util::par_chunks(pts.len(), 256, |range| {
        let partial: Vec<f64> = range
            .map(|i| {
                let (_, g) = field.eval_grad(pts[i], (1 << 32) + i as u64);
                eikonal_term(g)
            })
            .collect();
        crate::util::tree_sum(&partial)
    });
    crate::util::tree_sum(&terms) / pts.len() as f64
}

/// Latent regularization: mean over the touched parts of ||c_m|| + ||c_s||.
pub fn loss_latent(code_m: &[f64], code_s: &[f64], code_dim: usize, touched: &[bool]) -> f64 {
    let count = touched.iter().filter(|&&t| t).count();
    if count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (k, &t) in touched.iter().enumerate() {
        if !t {
            continue;
        }
        let cm = &code_m[k * code_dim..(k + 1) * code_dim];
        let cs = &code_s[k * code_dim..(k + 1) * code_dim];
        acc += norm_slice(cm) + norm_slice(cs);
    }
    acc / count as f64
}

/// Gradient of [`loss_latent`] accumulated into per-part code gradients.
pub fn loss_latent_backward(
    code_m: &[f64],
    code_s: &[f64],
    code_dim: usize,
    touched: &[bool],
    weight: f64,
    grad_m: &mut [f64],
    grad_s: &mut [f64],
) {
    let count = touched.iter().filter(|&&t| t).count();
    if count == 0 {
        return;
    }
    let w = weight / count as f64;
    for (k, &t) in touched.iter().enumerate() {
        if !t {
            continue;
        }
        for (codes, grads) in [(code_m, &mut *grad_m), (code_s, &mut *grad_s)] {
            let c = &codes[k * code_dim..(k + 1) * code_dim];
            let n = norm_slice(c);
            if n > 1e-12 {
                let g = &mut grads[k * code_dim..(k + 1) * code_dim];
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += w * ci / n;
                }
            }
        }
    }
}

fn norm_slice(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean inner-body penalty over vertices.
pub fn loss_refine_body(sdfs: &[f64], eta: f64) -> f64 {
    if sdfs.is_empty() {
        return 0.0;
    }
    sdfs.iter().map(|&s| refine_body_term(s, eta)).sum::<f64>() / sdfs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ObservationKind {
    /// Complete cloud: symmetric Chamfer.
    Complete,
    /// Partial (depth) cloud: one-sided observed-to-surface distance.
    Partial,
}

/// Observation loss between reconstruction samples and an observed cloud,
/// with squared distances. Complete mode averages both directions; partial
/// mode penalizes only observed points against the surface samples.
pub fn loss_observation(
    reconstruction: &[Vec3],
    observed: &[Vec3],
    kind: ObservationKind,
) -> Result<f64, ObjectiveError> {
    if reconstruction.is_empty() || observed.is_empty() {
        return Err(ObjectiveError::EmptyInput);
    }
    let obs_to_rec = mean_sq_nn(observed, reconstruction);
    match kind {
        ObservationKind::Complete => {
            let rec_to_obs = mean_sq_nn(reconstruction, observed);
            Ok(0.5 * (obs_to_rec + rec_to_obs))
        }
        ObservationKind::Partial => Ok(obs_to_rec),
    }
}

fn mean_sq_nn(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = crate::geometry::KdTree::build(to);
    let sums = crate::util::par_chunks(from.len(), 512, |range| {
        let partial: Vec<f64> = range
            .map(|i| {
                let n = tree.nearest(from[i]);
                n.dist * n.dist
            })
            .collect();
        crate::util::tree_sum(&partial)
    });
    crate::util::tree_sum(&sums) / from.len() as f64
}

/// L1 color loss: mean absolute difference over points and channels.
pub fn loss_color(predicted: &[[f64; 3]], observed: &[[f64; 3]]) -> f64 {
    assert_eq!(predicted.len(), observed.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (p, o) in predicted.iter().zip(observed) {
        for c in 0..3 {
            acc += (p[c] - o[c]).abs();
        }
    }
    acc / (3 * predicted.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Train,
    Fit,
    Refine,
}

/// Weighted total. Train and fit combine (L_s, L_e, L_c); refine combines
/// (L_body, L_obs, L_reg).
pub fn total_loss(mode: LossMode, components: [f64; 3], weights: &LossWeights) -> f64 {
    let _ = mode;
    weights.l1 * components[0] + weights.l2 * components[1] + weights.l3 * components[2]
}

/// Appends per-step loss rows to a CSV (step, L_s, L_e, L_c, total).
pub struct LossLogger {
    writer: std::io::BufWriter<std::fs::File>,
}

impl LossLogger {
    pub fn create(path: &std::path::Path) -> Result<LossLogger, ObjectiveError> {
        let mut writer = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(writer, "step,loss_surface,loss_eikonal,loss_latent,total")?;
        Ok(LossLogger { writer })
    }

    pub fn log(&mut self, step: usize, ls: f64, le: f64, lc: f64, total: f64) -> Result<(), ObjectiveError> {
        writeln!(self.writer, "{step},{ls},{le},{lc},{total}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), ObjectiveError> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_surface;

    fn plane_field() -> impl SdfField {
        // z = 0 plane with upward normal
        |x: Vec3| (x[2], [0.0, 0.0, 1.0])
    }

    fn sphere_field(center: Vec3, r: f64) -> impl SdfField {
        move |x: Vec3| {
            let d = math::sub(x, center);
            let n = math::norm(d);
            (n - r, math::scale(d, 1.0 / n))
        }
    }

    fn plane_batch(n: usize, flipped: bool) -> SampleBatch {
        let mut rng = DetRng::new(3);
        let surface: Vec<Vec3> = (0..n)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), 0.0])
            .collect();
        let nz = if flipped { -1.0 } else { 1.0 };
        SampleBatch {
            normals: vec![[0.0, 0.0, nz]; n],
            colors: None,
            near: surface.clone(),
            free: vec![],
            surface,
            time: 0.0,
        }
    }

    #[test]
    fn surface_loss_zero_on_exact_plane() {
        let batch = plane_batch(200, false);
        assert!(loss_surface(&batch, &plane_field()) < 1e-9);
    }

    #[test]
    fn surface_loss_two_for_flipped_normals() {
        let batch = plane_batch(200, true);
        let l = loss_surface(&batch, &plane_field());
        assert!((l - 2.0).abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn surface_loss_value_term_for_constant_field() {
        let batch = plane_batch(100, false);
        let c = 0.37;
        // constant field: |f| = c everywhere, gradient zero so the normal
        // term contributes exactly 1 per point
        let field = move |_: Vec3| (c, [0.0, 0.0, 0.0]);
        let l = loss_surface(&batch, &field);
        assert!((l - (c + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn eikonal_loss_oracles() {
        let batch = plane_batch(150, false);
        assert!(loss_eikonal(&batch, &sphere_field([0.0, 0.0, 3.0], 0.5)) < 1e-9);
        let zero_field = |_: Vec3| (0.0, [0.0; 3]);
        assert!((loss_eikonal(&batch, &zero_field) - 1.0).abs() < 1e-12);
        let double_plane = |x: Vec3| (2.0 * x[2], [0.0, 0.0, 2.0]);
        assert!((loss_eikonal(&batch, &double_plane) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_loss_values() {
        let dim = 4;
        let mut cm = vec![0.0; 2 * dim];
        let cs = vec![0.0; 2 * dim];
        assert_eq!(loss_latent(&cm, &cs, dim, &[true, true]), 0.0);
        cm[0] = 1.0; // part 0: c_m = e1
        assert!((loss_latent(&cm, &cs, dim, &[true, false]) - 1.0).abs() < 1e-15);
        // random codes against direct norm computation
        let mut rng = DetRng::new(5);
        let cm: Vec<f64> = (0..2 * dim).map(|_| rng.normal()).collect();
        let cs: Vec<f64> = (0..2 * dim).map(|_| rng.normal()).collect();
        let manual = 0.5
            * ((norm_slice(&cm[..dim]) + norm_slice(&cs[..dim]))
                + (norm_slice(&cm[dim..]) + norm_slice(&cs[dim..])));
        let got = loss_latent(&cm, &cs, dim, &[true, true]);
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn latent_backward_matches_fd() {
        let dim = 3;
        let mut rng = DetRng::new(9);
        let cm: Vec<f64> = (0..2 * dim).map(|_| rng.normal()).collect();
        let cs: Vec<f64> = (0..2 * dim).map(|_| rng.normal()).collect();
        let touched = [true, true];
        let mut gm = vec![0.0; 2 * dim];
        let mut gs = vec![0.0; 2 * dim];
        loss_latent_backward(&cm, &cs, dim, &touched, 1.0, &mut gm, &mut gs);
        let h = 1e-6;
        for i in 0..2 * dim {
            let mut p = cm.clone();
            p[i] += h;
            let mut m = cm.clone();
            m[i] -= h;
            let fd = (loss_latent(&p, &cs, dim, &touched) - loss_latent(&m, &cs, dim, &touched)) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-8, "cm {i}");
        }
    }

    #[test]
    fn refine_body_term_cases() {
        assert!((refine_body_term(0.02, 5.0) - 0.02).abs() < 1e-15);
        assert!((refine_body_term(-0.02, 5.0) - 0.004).abs() < 1e-15);
        assert_eq!(refine_body_term(0.0, 5.0), 0.0);
    }

    #[test]
    fn observation_loss_cases() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(
            loss_observation(&a, &a, ObservationKind::Complete).unwrap(),
            0.0
        );
        // two single points at distance d, complete mode -> d^2
        let d = 0.37;
        let p = vec![[0.0; 3]];
        let q = vec![[d, 0.0, 0.0]];
        let l = loss_observation(&p, &q, ObservationKind::Complete).unwrap();
        assert!((l - d * d).abs() < 1e-15);
        // partial: observed point on the sampled surface -> 0
        let surface = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let obs = vec![[1.0, 0.0, 0.0]];
        assert_eq!(
            loss_observation(&surface, &obs, ObservationKind::Partial).unwrap(),
            0.0
        );
    }

    #[test]
    fn color_loss_cases() {
        let gt = vec![[0.2, 0.4, 0.6]; 10];
        assert_eq!(loss_color(&gt, &gt), 0.0);
        let mut off = gt.clone();
        for c in &mut off {
            c[0] += 0.5;
        }
        assert!((loss_color(&off, &gt) - 0.5 / 3.0).abs() < 1e-12);
        let mut rng = DetRng::new(8);
        let a: Vec<[f64; 3]> = (0..50).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
        let b: Vec<[f64; 3]> = (0..50).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
        let manual = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
            .sum::<f64>()
            / 150.0;
        assert!((loss_color(&a, &b) - manual).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        assert_eq!(
            total_loss(LossMode::Train, [0.0; 3], &LossWeights::train()),
            0.0
        );
        let t = total_loss(LossMode::Train, [1.0; 3], &LossWeights::train());
        assert!((t - 1.101).abs() < 1e-12);
        let r = total_loss(LossMode::Refine, [1.0; 3], &LossWeights::refine());
        assert!((r - 101.001).abs() < 1e-12);
    }

    #[test]
    fn batch_sampling_statistics() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.3, 16, 24);
        let bbox = sphere.aabb().padded(0.1);
        // near-surface displacement std over many draws
        let mut acc = 0.0;
        let mut n = 0usize;
        for seed in 0..40 {
            let b = sample_batch_from_mesh(&sphere, &bbox, 1000, 0.0, seed).unwrap();
            for (s, nr) in b.surface.iter().zip(&b.near) {
                for a in 0..3 {
                    let d = nr[a] - s[a];
                    acc += d * d;
                    n += 1;
                }
            }
        }
        let std = (acc / n as f64).sqrt();
        assert!((std - NEAR_SURFACE_STD).abs() < 5e-4, "std {std}");

        let b = sample_batch_from_mesh(&sphere, &bbox, 1000, 0.0, 7).unwrap();
        assert!(b.free.iter().all(|p| bbox.contains(*p)));
        assert_eq!(b.free.len(), 125);
        let tiny = sample_batch_from_mesh(&sphere, &bbox, 8, 0.0, 7).unwrap();
        assert_eq!(tiny.free.len(), 1);
        assert!(matches!(
            sample_batch_from_mesh(&sphere, &bbox, 7, 0.0, 7),
            Err(ObjectiveError::BatchTooSmall(7))
        ));
    }

    #[test]
    fn cloud_batch_draws_from_cloud() {
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.3, 16, 24);
        let cloud = sample_surface(&sphere, 500, 3).unwrap().with_time(0.25);
        let bbox = sphere.aabb().padded(0.1);
        let b = sample_batch_from_cloud(&cloud, &bbox, 64, 11).unwrap();
        assert_eq!(b.time, 0.25);
        for p in &b.surface {
            assert!(cloud.points.contains(p));
        }
    }
}
