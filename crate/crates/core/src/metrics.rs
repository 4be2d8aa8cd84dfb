//! Evaluation metrics: symmetric squared Chamfer distance, normal
//! consistency (L2 between matched normals, symmetrized), and F-Score at a
//! distance threshold. Inputs are dense surface samples, not mesh vertices.

use crate::geometry::{sample_surface, GeometryError, KdTree, OrientedPointCloud, TriMesh};
use crate::math::{self, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty sample set")]
    EmptySet,
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
}

pub const DEFAULT_TAU: f64 = 0.005;
pub const DEFAULT_METRIC_SAMPLES: usize = 100_000;

/// Per-frame metric values.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameMetrics {
    /// Mean squared nearest-neighbor distance, symmetric (m^2).
    pub chamfer_l2: f64,
    /// Symmetrized mean L2 distance between matched normals.
    pub normal_consistency: f64,
    /// One-sided normal distances (pred->gt, gt->pred).
    pub normal_pred_to_gt: f64,
    pub normal_gt_to_pred: f64,
    /// Harmonic mean of precision and recall at tau.
    pub f_score: f64,
}

/// Sequence-level report: per-frame metrics and their means.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub tau: f64,
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
}

impl MetricReport {
    pub fn from_frames(tau: f64, frames: Vec<FrameMetrics>) -> MetricReport {
        let n = frames.len().max(1) as f64;
        let mut mean = FrameMetrics {
            chamfer_l2: 0.0,
            normal_consistency: 0.0,
            normal_pred_to_gt: 0.0,
            normal_gt_to_pred: 0.0,
            f_score: 0.0,
        };
        for f in &frames {
            mean.chamfer_l2 += f.chamfer_l2 / n;
            mean.normal_consistency += f.normal_consistency / n;
            mean.normal_pred_to_gt += f.normal_pred_to_gt / n;
            mean.normal_gt_to_pred += f.normal_gt_to_pred / n;
            mean.f_score += f.f_score / n;
        }
        MetricReport { tau, frames, mean }
    }

    /// Aligned text table in the conventional column layout
    /// (Chamfer x 1e-4 m^2, normal distance, F-Score).
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("frame  Ch.-L2(x1e-4)  Normal   F-Score\n");
        for (i, f) in self.frames.iter().enumerate() {
            out.push_str(&format!(
                "{:>5}  {:>13.4}  {:>6.4}  {:>7.4}\n",
                i,
                f.chamfer_l2 * 1e4,
                f.normal_consistency,
                f.f_score
            ));
        }
        out.push_str(&format!(
            "{:>5}  {:>13.4}  {:>6.4}  {:>7.4}\n",
            "mean",
            self.mean.chamfer_l2 * 1e4,
            self.mean.normal_consistency,
            self.mean.f_score
        ));
        out
    }
}

/// Symmetric Chamfer-L2: mean squared nearest-neighbor distance averaged
/// over both directions.
pub fn chamfer_l2(pred: &[Vec3], gt: &[Vec3]) -> Result<f64, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(0.5 * (mean_sq(pred, gt) + mean_sq(gt, pred)))
}

fn mean_sq(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree = KdTree::build(to);
    let sums = crate::util::par_chunks(from.len(), 2048, |range| {
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

/// Mean L2 distance between each point's normal and its nearest neighbor's
/// normal, symmetrized. The one-sided values are also returned
/// (pred->gt, gt->pred).
pub fn normal_consistency(
    pred: &OrientedPointCloud,
    gt: &OrientedPointCloud,
) -> Result<(f64, f64, f64), MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let a = mean_normal_dist(pred, gt);
    let b = mean_normal_dist(gt, pred);
    Ok((0.5 * (a + b), a, b))
}

fn mean_normal_dist(from: &OrientedPointCloud, to: &OrientedPointCloud) -> f64 {
    let tree = KdTree::build(&to.points);
    let sums = crate::util::par_chunks(from.len(), 2048, |range| {
        let partial: Vec<f64> = range
            .map(|i| {
                let n = tree.nearest(from.points[i]);
                math::dist(from.normals[i], to.normals[n.index])
            })
            .collect();
        crate::util::tree_sum(&partial)
    });
    crate::util::tree_sum(&sums) / from.len() as f64
}

/// F-Score at threshold `tau`: harmonic mean of precision (pred within tau
/// of gt) and recall (gt within tau of pred); zero when both vanish.
pub fn f_score(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64, MetricError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let precision = frac_within(pred, gt, tau);
    let recall = frac_within(gt, pred, tau);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

fn frac_within(from: &[Vec3], to: &[Vec3], tau: f64) -> f64 {
    let tree = KdTree::build(to);
    let counts = crate::util::par_chunks(from.len(), 2048, |range| {
        range.filter(|&i| tree.nearest(from[i]).dist <= tau).count()
    });
    counts.iter().sum::<usize>() as f64 / from.len() as f64
}

/// Samples both meshes and evaluates the full metric suite for one frame.
/// Both meshes are sampled with the same stream, so evaluating a mesh
/// against itself yields exact zeros.
pub fn eval_meshes(
    pred: &TriMesh,
    gt: &TriMesh,
    samples: usize,
    tau: f64,
    seed: u64,
) -> Result<FrameMetrics, MetricError> {
    let pred_cloud = sample_surface(pred, samples, crate::util::derive_seed(&[seed, 1]))?;
    let gt_cloud = sample_surface(gt, samples, crate::util::derive_seed(&[seed, 1]))?;
    eval_clouds(&pred_cloud, &gt_cloud, tau)
}

pub fn eval_clouds(
    pred: &OrientedPointCloud,
    gt: &OrientedPointCloud,
    tau: f64,
) -> Result<FrameMetrics, MetricError> {
    let chamfer = chamfer_l2(&pred.points, &gt.points)?;
    let (nc, n_pg, n_gp) = normal_consistency(pred, gt)?;
    let f = f_score(&pred.points, &gt.points, tau)?;
    Ok(FrameMetrics {
        chamfer_l2: chamfer,
        normal_consistency: nc,
        normal_pred_to_gt: n_pg,
        normal_gt_to_pred: n_gp,
        f_score: f,
    })
}

/// Evaluates a mesh sequence pair frame by frame.
pub fn eval_sequences(
    pred: &[TriMesh],
    gt: &[TriMesh],
    samples: usize,
    tau: f64,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    assert_eq!(pred.len(), gt.len());
    let frames = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| eval_meshes(p, g, samples, tau, crate::util::derive_seed(&[seed, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_frames(tau, frames))
}
