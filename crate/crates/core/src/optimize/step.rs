//! Fused loss / gradient evaluation of one optimizer step: evaluates the
//! composed field at every sampled point of the selected frames, forms the
//! IGR losses, and backpropagates into weight and code gradient buffers.
//! Work is split into fixed-size point chunks merged in order, so results
//! are bit-identical for any worker count.

use crate::fields::{
    part_sdf_backward, part_sdf_grad, FieldGrads, FieldModel, FieldWorkspace, PartCodeCaches,
};
use crate::math::{self, Vec3};
use crate::objectives::{
    eikonal_term, eikonal_term_bar, loss_latent, loss_latent_backward, surface_term,
    surface_term_bar, LossWeights, SampleBatch,
};
use crate::parts::{PartSet, PartsAtTime};

const CHUNK: usize = 64;

enum JobKind {
    Surface { normal: Vec3 },
    OffSurface,
}

struct Job {
    x: Vec3,
    frame: usize,
    kind: JobKind,
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub surface: f64,
    pub eikonal: f64,
    pub latent: f64,
    pub total: f64,
}

/// Evaluates the step loss over the batches (one per entry of `pats`) and
/// accumulates gradients. Point part-selection seeds derive from
/// `(seed, step, point index)`.
#[allow(clippy::too_many_arguments)]
pub fn sdf_loss_step(
    model: &FieldModel,
    parts: &PartSet,
    pats: &[PartsAtTime],
    batches: &[SampleBatch],
    n_select: usize,
    weights: &LossWeights,
    seed: u64,
    step: u64,
    train_weights: bool,
) -> (StepLosses, FieldGrads) {
    assert_eq!(pats.len(), batches.len());
    let mut jobs: Vec<Job> = Vec::new();
    for (fi, batch) in batches.iter().enumerate() {
        for (i, &x) in batch.surface.iter().enumerate() {
            jobs.push(Job {
                x,
                frame: fi,
                kind: JobKind::Surface {
                    normal: batch.normals[i],
                },
            });
        }
    }
    let n_surface = jobs.len();
    for (fi, batch) in batches.iter().enumerate() {
        for &x in batch.near.iter().chain(batch.free.iter()) {
            jobs.push(Job {
                x,
                frame: fi,
                kind: JobKind::OffSurface,
            });
        }
    }
    let n_off = jobs.len() - n_surface;
    let caches = PartCodeCaches::build(model, parts);

    let w_surface = if n_surface > 0 {
        weights.l1 / n_surface as f64
    } else {
        0.0
    };
    let w_eikonal = if n_off > 0 { weights.l2 / n_off as f64 } else { 0.0 };

    let partials = crate::util::par_chunks(jobs.len(), CHUNK, |range| {
        let mut grads = FieldGrads::zeros(model, parts.k(), parts.code_dim);
        let mut wss: Vec<FieldWorkspace> = (0..n_select.max(1))
            .map(|_| FieldWorkspace::new(model))
            .collect();
        let mut ls = 0.0;
        let mut le = 0.0;
        let mut sel_buf: Vec<(usize, f64, Vec3)> = Vec::with_capacity(n_select);
        for ji in range {
            let job = &jobs[ji];
            let pat = &pats[job.frame];
            let sel = pat.covering_parts(
                job.x,
                n_select,
                crate::util::derive_seed(&[seed, step, ji as u64]),
            );
            sel_buf.clear();
            let m = sel.len() as f64;
            let mut mean_f = 0.0;
            let mut mean_g = [0.0; 3];
            for (si, &k) in sel.iter().enumerate() {
                let (f, g) = part_sdf_grad(
                    model,
                    Some(&caches),
                    parts,
                    k,
                    &pat.frames[k],
                    job.x,
                    pat.time,
                    &mut wss[si],
                );
                sel_buf.push((k, f, g));
                mean_f += f / m;
                mean_g = math::add(mean_g, math::scale(g, 1.0 / m));
            }
            let (term_w, sdf_bar, g_bar) = match &job.kind {
                JobKind::Surface { normal } => {
                    ls += surface_term(mean_f, mean_g, *normal);
                    let (sb, gb) = surface_term_bar(mean_f, mean_g, *normal);
                    (w_surface, sb, gb)
                }
                JobKind::OffSurface => {
                    le += eikonal_term(mean_g);
                    (w_eikonal, 0.0, eikonal_term_bar(mean_g))
                }
            };
            for (si, &(k, _, _)) in sel_buf.iter().enumerate() {
                part_sdf_backward(
                    model,
                    parts,
                    k,
                    term_w * sdf_bar / m,
                    math::scale(g_bar, term_w / m),
                    &mut wss[si],
                    &mut grads,
                    train_weights,
                );
            }
        }
        (ls, le, grads)
    });

    let mut grads = FieldGrads::zeros(model, parts.k(), parts.code_dim);
    let mut ls_sum = 0.0;
    let mut le_sum = 0.0;
    for (ls, le, g) in &partials {
        ls_sum += ls;
        le_sum += le;
        grads.merge(g);
    }
    let surface = if n_surface > 0 { ls_sum / n_surface as f64 } else { 0.0 };
    let eikonal = if n_off > 0 { le_sum / n_off as f64 } else { 0.0 };
    let latent = loss_latent(&parts.code_m, &parts.code_s, parts.code_dim, &grads.touched);
    loss_latent_backward(
        &parts.code_m,
        &parts.code_s,
        parts.code_dim,
        &grads.touched,
        weights.l3,
        &mut grads.code_m,
        &mut grads.code_s,
    );
    let losses = StepLosses {
        surface,
        eikonal,
        latent,
        total: weights.l1 * surface + weights.l2 * eikonal + weights.l3 * latent,
    };
    (losses, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldModel, FieldSpecs};
    use crate::geometry::TriMesh;
    use crate::objectives::sample_batch_from_mesh;
    use crate::parts::build_part_set;
    use crate::util::DetRng;

    fn setup() -> (FieldModel, PartSet, Vec<PartsAtTime>, Vec<SampleBatch>) {
        let mut specs = FieldSpecs::desk(8, 0.05);
        specs.motion.hidden = vec![10, 8];
        specs.motion.skip_layers = vec![1];
        specs.shape.hidden = vec![10, 8];
        specs.shape.skip_layers = vec![1];
        let model = FieldModel::new(specs, 3);
        let sphere = TriMesh::uv_sphere([0.0; 3], 0.08, 10, 14);
        let seq = vec![sphere.clone(), sphere];
        let mut ps = build_part_set(&seq, &[0.0, 1.0], 0.05, 8, 5).unwrap();
        ps.init_codes(0.01, 7);
        let bbox = seq[0].aabb().padded(0.05);
        let batches: Vec<SampleBatch> = (0..2)
            .map(|f| sample_batch_from_mesh(&seq[f], &bbox, 24, f as f64, 100 + f as u64).unwrap())
            .collect();
        let pats = vec![ps.at_index(0), ps.at_index(1)];
        (model, ps, pats, batches)
    }

    #[test]
    fn step_is_deterministic() {
        let (model, ps, pats, batches) = setup();
        let w = LossWeights::train();
        let (l1, g1) = sdf_loss_step(&model, &ps, &pats, &batches, 4, &w, 9, 0, true);
        let (l2, g2) = sdf_loss_step(&model, &ps, &pats, &batches, 4, &w, 9, 0, true);
        assert_eq!(l1.total, l2.total);
        assert_eq!(g1.motion_w, g2.motion_w);
        assert_eq!(g1.shape_w, g2.shape_w);
        assert_eq!(g1.code_s, g2.code_s);
    }

    #[test]
    fn step_gradients_match_fd() {
        let (model, ps, pats, batches) = setup();
        let w = LossWeights::train();
        let loss_of = |model: &FieldModel, ps: &PartSet| -> f64 {
            sdf_loss_step(model, ps, &pats, &batches, 4, &w, 9, 0, false).0.total
        };
        let (_, grads) = sdf_loss_step(&model, &ps, &pats, &batches, 4, &w, 9, 0, true);
        let h = 1e-6;
        let mut idx = DetRng::new(31);
        for _ in 0..12 {
            let i = idx.below(model.shape.n_params);
            let mut mp = model.clone();
            mp.weights.shape[i] += h;
            let mut mm = model.clone();
            mm.weights.shape[i] -= h;
            let fd = (loss_of(&mp, &ps) - loss_of(&mm, &ps)) / (2.0 * h);
            let an = grads.shape_w[i];
            assert!(
                (fd - an).abs() / (fd.abs() + an.abs() + 1e-5) < 1e-3,
                "shape w {i}: fd {fd} an {an}"
            );
        }
        for _ in 0..12 {
            let i = idx.below(ps.k() * ps.code_dim);
            let mut pp = ps.clone();
            pp.code_m[i] += h;
            let mut pm = ps.clone();
            pm.code_m[i] -= h;
            let fd = (loss_of(&model, &pp) - loss_of(&model, &pm)) / (2.0 * h);
            let an = grads.code_m[i];
            assert!(
                (fd - an).abs() / (fd.abs() + an.abs() + 1e-5) < 1e-3,
                "code_m {i}: fd {fd} an {an}"
            );
        }
    }
}
