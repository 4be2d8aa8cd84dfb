//! Optimization drivers: corpus training (weights + codes), test-time
//! auto-decoding (codes only, frozen weights), alternating inner-body
//! refining, and per-sequence texture fitting. All stochastic choices are
//! keyed by (seed, step, index), so runs resume bit-exactly from checkpoints.

mod adam;
mod checkpoint;
mod step;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, StoredSequence, FORMAT_VERSION};
pub use step::{sdf_loss_step, StepLosses};

use crate::body::{
    body_bbox, lbs_backward, pose_body, pose_sequence, BodyError, BodyParams, BodyTemplate,
};
use crate::fields::{FieldError, FieldModel, FieldSpecs, FieldWorkspace, PartCodeCaches};
use crate::geometry::{Aabb, GeometryError, TriMesh};
use crate::math::{self, Vec3};
use crate::objectives::{
    refine_body_term, refine_body_term_bar, sample_batch_from_cloud,
    sample_batch_from_mesh, LossLogger, LossWeights, ObjectiveError, ObservationKind, SampleBatch,
};
use crate::parts::{build_global_part_set, build_part_set, track_parts, PartsError, PartSet};
use crate::synth::SequenceObservation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: u64 },
    #[error("sequence frame count {got} does not match configured {want}")]
    FrameMismatch { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("body: {0}")]
    Body(#[from] BodyError),
    #[error("parts: {0}")]
    Parts(#[from] PartsError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("field: {0}")]
    Field(#[from] FieldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("observation has no colors (texture fitting needs a colored cloud)")]
    MissingColors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetPreset {
    Paper,
    Desk,
}

fn default_frames() -> usize {
    17
}
fn default_radius() -> f64 {
    0.05
}
fn default_code_dim() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    500
}
fn default_fit_iterations() -> usize {
    3000
}
fn default_m() -> usize {
    10_000
}
fn default_n_fit() -> usize {
    4
}
fn default_n_extract() -> usize {
    32
}
fn default_padding() -> f64 {
    0.10
}
fn default_resolution() -> usize {
    256
}
fn default_refine_rounds() -> usize {
    2
}
fn default_refine_iterations() -> usize {
    300
}
fn default_refine_lr() -> f64 {
    1e-2
}
fn default_refine_refit() -> usize {
    600
}
fn default_refine_vertex_samples() -> usize {
    300
}
fn default_refine_surface_samples() -> usize {
    500
}
fn default_lambda_smooth() -> f64 {
    0.1
}
fn default_eta() -> f64 {
    5.0
}
fn default_texture_iterations() -> usize {
    800
}
fn default_metric_samples() -> usize {
    100_000
}
fn default_tau() -> f64 {
    0.005
}
fn default_net_preset() -> NetPreset {
    NetPreset::Paper
}
fn default_loss_train() -> LossWeights {
    LossWeights::train()
}
fn default_loss_refine() -> LossWeights {
    LossWeights::refine()
}
fn default_frames_per_step() -> usize {
    17
}
fn default_postprocess() -> crate::extract::PostprocessParams {
    crate::extract::PostprocessParams::default()
}

/// All knobs of the pipeline. Defaults mirror the reference settings
/// (learning rate 1e-3, batch of one sequence, 3000 fit iterations, L = 17,
/// r = 5 cm, n = 4 during fitting and 32 during extraction, M = 10000
/// surface samples, 10 cm extraction padding, resolution 256).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_radius")]
    pub part_radius: f64,
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    #[serde(default = "default_net_preset")]
    pub net_preset: NetPreset,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub train_epochs: usize,
    #[serde(default = "default_fit_iterations")]
    pub fit_iterations: usize,
    #[serde(default = "default_m")]
    pub samples_per_frame: usize,
    #[serde(default = "default_frames_per_step")]
    pub frames_per_step: usize,
    #[serde(default = "default_n_fit")]
    pub n_fit: usize,
    #[serde(default = "default_n_extract")]
    pub n_extract: usize,
    #[serde(default = "default_loss_train")]
    pub loss_train: LossWeights,
    #[serde(default = "default_loss_refine")]
    pub loss_refine: LossWeights,
    #[serde(default = "default_padding")]
    pub padding: f64,
    #[serde(default = "default_resolution")]
    pub extract_resolution: usize,
    #[serde(default = "default_postprocess")]
    pub postprocess: crate::extract::PostprocessParams,
    #[serde(default = "default_refine_rounds")]
    pub refine_rounds: usize,
    #[serde(default = "default_refine_iterations")]
    pub refine_iterations: usize,
    #[serde(default = "default_refine_lr")]
    pub refine_lr: f64,
    #[serde(default = "default_refine_refit")]
    pub refine_refit_iterations: usize,
    #[serde(default = "default_refine_vertex_samples")]
    pub refine_vertex_samples: usize,
    #[serde(default = "default_refine_surface_samples")]
    pub refine_surface_samples: usize,
    #[serde(default = "default_lambda_smooth")]
    pub lambda_smooth: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_texture_iterations")]
    pub texture_iterations: usize,
    #[serde(default = "default_lr")]
    pub texture_lr: f64,
    #[serde(default = "default_metric_samples")]
    pub metric_samples: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    /// Reference full-scale settings.
    pub fn paper_defaults() -> RunConfig {
        RunConfig::default()
    }

    /// Reduced settings for desk-scale runs and the test suite.
    pub fn desk() -> RunConfig {
        RunConfig {
            net_preset: NetPreset::Desk,
            samples_per_frame: 160,
            frames_per_step: 2,
            train_epochs: 220,
            fit_iterations: 700,
            extract_resolution: 56,
            refine_iterations: 150,
            refine_refit_iterations: 350,
            refine_vertex_samples: 220,
            refine_surface_samples: 400,
            texture_iterations: 500,
            metric_samples: 20_000,
            ..RunConfig::default()
        }
    }

    pub fn field_specs(&self) -> FieldSpecs {
        match self.net_preset {
            NetPreset::Paper => FieldSpecs::paper(self.code_dim, self.part_radius),
            NetPreset::Desk => FieldSpecs::desk(self.code_dim, self.part_radius),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|f| f as f64 / (self.frames - 1).max(1) as f64)
            .collect()
    }
}

/// One training sequence: ground-truth clothed meshes plus the inner body.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub name: String,
    pub clothed: Vec<TriMesh>,
    pub body: Vec<TriMesh>,
}

/// Initializes training state: samples and tracks parts on each sequence,
/// draws codes from N(0, 0.01), and initializes weights and moments.
pub fn init_training(corpus: &[TrainSequence], config: &RunConfig) -> Result<Checkpoint, OptimError> {
    assert!(!corpus.is_empty());
    let times = config.times();
    let model = FieldModel::new(config.field_specs(), crate::util::derive_seed(&[config.seed, 0x77]));
    let mut sequences = Vec::new();
    for (i, seq) in corpus.iter().enumerate() {
        if seq.body.len() != config.frames || seq.clothed.len() != config.frames {
            return Err(OptimError::FrameMismatch {
                got: seq.body.len(),
                want: config.frames,
            });
        }
        let mut parts = build_part_set(
            &seq.body,
            &times,
            config.part_radius,
            config.code_dim,
            crate::util::derive_seed(&[config.seed, 0x7061, i as u64]),
        )?;
        parts.init_codes(0.01, crate::util::derive_seed(&[config.seed, 0x636f, i as u64]));
        sequences.push(StoredSequence::new(seq.name.clone(), parts));
    }
    Ok(Checkpoint {
        config: config.clone(),
        specs: model.specs(),
        adam_motion: AdamState::new(model.motion.n_params),
        adam_shape: AdamState::new(model.shape.n_params),
        adam_texture: AdamState::new(model.texture.n_params),
        weights: model.weights,
        sequences,
        step: 0,
    })
}

/// Variant of [`init_training`] with a single global part per sequence
/// (the local-vs-global baseline).
pub fn init_training_global(
    corpus: &[TrainSequence],
    config: &RunConfig,
) -> Result<Checkpoint, OptimError> {
    let mut ck = init_training(corpus, config)?;
    let times = config.times();
    for (i, seq) in corpus.iter().enumerate() {
        let mut parts = build_global_part_set(&seq.body, &times, config.code_dim)?;
        parts.init_codes(0.01, crate::util::derive_seed(&[config.seed, 0x636f, i as u64]));
        ck.sequences[i] = StoredSequence::new(seq.name.clone(), parts);
    }
    Ok(ck)
}

fn frame_ids_for_step(step: u64, per_step: usize, total: usize) -> Vec<usize> {
    (0..per_step.min(total))
        .map(|o| (step as usize * per_step + o) % total)
        .collect()
}

/// Runs `steps` optimizer steps, continuing from `ck.step`. Each step trains
/// one sequence (round robin) on a deterministic rolling frame subset.
pub fn train_steps(
    ck: &mut Checkpoint,
    corpus: &[TrainSequence],
    steps: u64,
    mut logger: Option<&mut LossLogger>,
) -> Result<(), OptimError> {
    let config = ck.config.clone();
    let mut model = FieldModel::from_weights(ck.specs.clone(), ck.weights.clone());
    let times = config.times();
    let bboxes: Vec<Vec<Aabb>> = corpus
        .iter()
        .map(|s| body_bbox(&s.body, config.padding))
        .collect::<Result<_, _>>()?;
    let end = ck.step + steps;
    while ck.step < end {
        let step = ck.step;
        let si = (step as usize) % corpus.len();
        let seq = &corpus[si];
        let frame_ids = frame_ids_for_step(step / corpus.len() as u64, config.frames_per_step, config.frames);
        let mut batches: Vec<SampleBatch> = Vec::with_capacity(frame_ids.len());
        let mut pats = Vec::with_capacity(frame_ids.len());
        for &fi in &frame_ids {
            batches.push(sample_batch_from_mesh(
                &seq.clothed[fi],
                &bboxes[si][fi],
                config.samples_per_frame,
                times[fi],
                crate::util::derive_seed(&[config.seed, 0x6274, step, fi as u64]),
            )?);
            pats.push(ck.sequences[si].parts.at_index(fi));
        }
        let (losses, grads) = sdf_loss_step(
            &model,
            &ck.sequences[si].parts,
            &pats,
            &batches,
            config.n_fit,
            &config.loss_train,
            config.seed,
            step,
            true,
        );
        if !losses.total.is_finite() {
            return Err(OptimError::DivergedLoss { step });
        }
        grads.check_finite().map_err(|_| OptimError::DivergedLoss { step })?;
        adam_step(
            &mut model.weights.motion,
            &grads.motion_w,
            &mut ck.adam_motion,
            config.learning_rate,
        );
        adam_step(
            &mut model.weights.shape,
            &grads.shape_w,
            &mut ck.adam_shape,
            config.learning_rate,
        );
        let stored = &mut ck.sequences[si];
        adam_step(
            &mut stored.parts.code_m,
            &grads.code_m,
            &mut stored.adam_m,
            config.learning_rate,
        );
        adam_step(
            &mut stored.parts.code_s,
            &grads.code_s,
            &mut stored.adam_s,
            config.learning_rate,
        );
        if let Some(log) = logger.as_deref_mut() {
            log.log(step as usize, losses.surface, losses.eikonal, losses.latent, losses.total)?;
        }
        ck.step += 1;
    }
    ck.weights = model.weights;
    Ok(())
}

/// Full training run: initialization plus `train_epochs` passes over the
/// corpus (one step per sequence per pass).
pub fn train(
    corpus: &[TrainSequence],
    config: &RunConfig,
    logger: Option<&mut LossLogger>,
) -> Result<Checkpoint, OptimError> {
    let mut ck = init_training(corpus, config)?;
    let steps = (config.train_epochs * corpus.len()) as u64;
    train_steps(&mut ck, corpus, steps, logger)?;
    Ok(ck)
}

/// Inputs of a test-time fit: the observation, the inner-body estimate used
/// for part tracking, and the template it indexes.
pub struct FitInput<'a> {
    pub observation: &'a SequenceObservation,
    pub template: &'a BodyTemplate,
    pub body_params: &'a BodyParams,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub stored: StoredSequence,
    pub body_params: BodyParams,
    /// (step, total loss) samples of the auto-decoding trajectory.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Auto-decoding: freezes the network weights and optimizes per-part latent
/// codes against the observation. Parts are sampled on the frame-0 body of
/// the provided estimate and tracked through its posed sequence.
pub fn fit_sequence(
    ck: &Checkpoint,
    input: &FitInput,
    config: &RunConfig,
    iterations: usize,
) -> Result<FitResult, OptimError> {
    let body_seq = pose_sequence(input.template, input.body_params)?;
    let times: Vec<f64> = (0..body_seq.len())
        .map(|f| f as f64 / (body_seq.len() - 1).max(1) as f64)
        .collect();
    let mut parts = build_part_set(
        &body_seq,
        &times,
        config.part_radius,
        config.code_dim,
        crate::util::derive_seed(&[config.seed, 0xf17, 0x7061]),
    )?;
    parts.init_codes(0.01, crate::util::derive_seed(&[config.seed, 0xf17, 0x636f]));
    let mut stored = StoredSequence::new("fit".into(), parts);
    let result = fit_codes(
        ck,
        &mut stored,
        input.observation,
        &body_seq,
        &times,
        config,
        iterations,
        0xf17,
    )?;
    Ok(FitResult {
        stored,
        body_params: input.body_params.clone(),
        loss_curve: result,
    })
}

/// Global-baseline variant of [`fit_sequence`]: one part covering the body.
pub fn fit_sequence_global(
    ck: &Checkpoint,
    input: &FitInput,
    config: &RunConfig,
    iterations: usize,
) -> Result<FitResult, OptimError> {
    let body_seq = pose_sequence(input.template, input.body_params)?;
    let times: Vec<f64> = (0..body_seq.len())
        .map(|f| f as f64 / (body_seq.len() - 1).max(1) as f64)
        .collect();
    let mut parts = build_global_part_set(&body_seq, &times, config.code_dim)?;
    parts.init_codes(0.01, crate::util::derive_seed(&[config.seed, 0xf17, 0x636f]));
    let mut stored = StoredSequence::new("fit".into(), parts);
    let result = fit_codes(
        ck,
        &mut stored,
        input.observation,
        &body_seq,
        &times,
        config,
        iterations,
        0xf17,
    )?;
    Ok(FitResult {
        stored,
        body_params: input.body_params.clone(),
        loss_curve: result,
    })
}

/// Core auto-decoding loop shared by fitting and refining. Weights stay
/// frozen; only the stored sequence's codes and moments change.
#[allow(clippy::too_many_arguments)]
fn fit_codes(
    ck: &Checkpoint,
    stored: &mut StoredSequence,
    observation: &SequenceObservation,
    body_seq: &[TriMesh],
    times: &[f64],
    config: &RunConfig,
    iterations: usize,
    stream: u64,
) -> Result<Vec<(usize, f64)>, OptimError> {
    let model = FieldModel::from_weights(ck.specs.clone(), ck.weights.clone());
    let bboxes = body_bbox(body_seq, config.padding)?;
    // map observed frames onto the tracked time grid
    let obs_frame_of: Vec<usize> = observation
        .times
        .iter()
        .map(|t| {
            times
                .iter()
                .position(|u| (u - t).abs() < 1e-9)
                .unwrap_or_else(|| panic!("observed time {t} not on the tracked grid"))
        })
        .collect();
    let pats: Vec<crate::parts::PartsAtTime> = obs_frame_of
        .iter()
        .map(|&fi| stored.parts.at_index(fi))
        .collect();
    let mut curve = Vec::new();
    for it in 0..iterations as u64 {
        let frame_ids = frame_ids_for_step(it, config.frames_per_step, observation.frames.len());
        let mut batches = Vec::with_capacity(frame_ids.len());
        let mut step_pats = Vec::with_capacity(frame_ids.len());
        for &oi in &frame_ids {
            let fi = obs_frame_of[oi];
            batches.push(sample_batch_from_cloud(
                &observation.frames[oi],
                &bboxes[fi],
                config.samples_per_frame,
                crate::util::derive_seed(&[config.seed, stream, it, oi as u64]),
            )?);
            step_pats.push(pats[oi].clone());
        }
        let (losses, grads) = sdf_loss_step(
            &model,
            &stored.parts,
            &step_pats,
            &batches,
            config.n_fit,
            &config.loss_train,
            crate::util::derive_seed(&[config.seed, stream]),
            it,
            false,
        );
        if !losses.total.is_finite() {
            return Err(OptimError::DivergedLoss { step: it });
        }
        grads.check_finite().map_err(|_| OptimError::DivergedLoss { step: it })?;
        adam_step(
            &mut stored.parts.code_m,
            &grads.code_m,
            &mut stored.adam_m,
            config.learning_rate,
        );
        adam_step(
            &mut stored.parts.code_s,
            &grads.code_s,
            &mut stored.adam_s,
            config.learning_rate,
        );
        if it % 25 == 0 || it + 1 == iterations as u64 {
            curve.push((it as usize, losses.total));
        }
    }
    Ok(curve)
}

/// Packages a fit into a standalone checkpoint file (weights copied from the
/// training checkpoint; the fitted sequence is the only entry).
pub fn fit_to_checkpoint(ck: &Checkpoint, fit: &FitResult, iterations: usize) -> Checkpoint {
    Checkpoint {
        config: ck.config.clone(),
        specs: ck.specs.clone(),
        weights: ck.weights.clone(),
        adam_motion: ck.adam_motion.clone(),
        adam_shape: ck.adam_shape.clone(),
        adam_texture: ck.adam_texture.clone(),
        sequences: vec![fit.stored.clone()],
        step: iterations as u64,
    }
}

// ---------------------------------------------------------------------------
// Inner-body refining
// ---------------------------------------------------------------------------

fn flatten_params(p: &BodyParams) -> Vec<f64> {
    let mut v = p.shape.clone();
    for pose in &p.poses {
        v.extend_from_slice(pose);
    }
    for t in &p.translations {
        v.extend_from_slice(t);
    }
    v
}

fn unflatten_params(flat: &[f64], frames: usize) -> BodyParams {
    let b = crate::body::NUM_SHAPE;
    let pj = 3 * crate::body::NUM_JOINTS;
    let mut poses = Vec::with_capacity(frames);
    for f in 0..frames {
        poses.push(flat[b + f * pj..b + (f + 1) * pj].to_vec());
    }
    let toff = b + frames * pj;
    let translations = (0..frames)
        .map(|f| {
            [
                flat[toff + 3 * f],
                flat[toff + 3 * f + 1],
                flat[toff + 3 * f + 2],
            ]
        })
        .collect();
    BodyParams {
        shape: flat[..b].to_vec(),
        poses,
        translations,
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RefineStats {
    /// Mean body-vertex penalty under the initial parameters / fit.
    pub body_loss_before: f64,
    /// Same quantity after the final alternation round.
    pub body_loss_after: f64,
    /// Accepted total refine loss after each round.
    pub round_losses: Vec<f64>,
}

/// Mean asymmetric body penalty over all frames at a dense vertex sample.
fn mean_body_loss(
    model: &FieldModel,
    stored: &StoredSequence,
    template: &BodyTemplate,
    params: &BodyParams,
    config: &RunConfig,
) -> Result<f64, OptimError> {
    let body_seq = pose_sequence(template, params)?;
    let caches = PartCodeCaches::build(model, &stored.parts);
    let mut total = 0.0;
    let mut count = 0usize;
    for (fi, mesh) in body_seq.iter().enumerate() {
        let pat = stored.parts.at_index(fi);
        let vals = crate::util::par_chunks(mesh.vertices.len(), 256, |range| {
            let mut ws = FieldWorkspace::new(model);
            let partial: Vec<f64> = range
                .map(|vi| {
                    let sel = pat.covering_parts(
                        mesh.vertices[vi],
                        config.n_fit,
                        crate::util::derive_seed(&[config.seed, 0xeb, fi as u64, vi as u64]),
                    );
                    let mut f = 0.0;
                    for &k in &sel {
                        f += crate::fields::part_sdf(
                            model,
                            Some(&caches),
                            &stored.parts,
                            k,
                            &pat.frames[k],
                            mesh.vertices[vi],
                            pat.time,
                            &mut ws,
                        );
                    }
                    refine_body_term(f / sel.len() as f64, config.eta)
                })
                .collect();
            crate::util::tree_sum(&partial)
        });
        total += crate::util::tree_sum(&vals);
        count += mesh.vertices.len();
    }
    Ok(total / count as f64)
}

/// One evaluation of the refine objective and its gradient w.r.t. the flat
/// body parameter vector. Frames and latent codes are frozen.
#[allow(clippy::too_many_arguments)]
fn refine_loss_and_grad(
    model: &FieldModel,
    caches: &PartCodeCaches,
    stored: &StoredSequence,
    template: &BodyTemplate,
    flat: &[f64],
    flat_init: &[f64],
    observation: &SequenceObservation,
    surface_anchors: &[(usize, [f64; 3])],
    config: &RunConfig,
    iter_seed: u64,
    frame_ids: &[usize],
    with_grad: bool,
) -> Result<(f64, Vec<f64>), OptimError> {
    let frames = observation.frames.len();
    let params = unflatten_params(flat, frames);
    let w = &config.loss_refine;
    let mut grad = vec![0.0; flat.len()];
    let mut total = 0.0;
    let b = crate::body::NUM_SHAPE;
    let pj = 3 * crate::body::NUM_JOINTS;

    for &fi in frame_ids {
        let mesh = pose_body(template, &params.shape, &params.poses[fi], params.translations[fi])?;
        let pat = stored.parts.at_index(fi);
        let mut vertex_ids: Vec<usize> = Vec::new();
        let mut vertex_bar: Vec<Vec3> = Vec::new();

        // asymmetric body penalty on a vertex subsample
        let mut rng = crate::util::DetRng::from_parts(&[iter_seed, fi as u64, 0x76]);
        let ids: Vec<usize> = (0..config.refine_vertex_samples.min(mesh.vertices.len()))
            .map(|_| rng.below(mesh.vertices.len()))
            .collect();
        let mut ws = FieldWorkspace::new(model);
        let nv = ids.len() as f64;
        for &vi in &ids {
            let x = mesh.vertices[vi];
            let sel = pat.covering_parts(
                x,
                config.n_fit,
                crate::util::derive_seed(&[iter_seed, fi as u64, vi as u64]),
            );
            let m = sel.len() as f64;
            let mut f = 0.0;
            let mut g = [0.0; 3];
            for &k in &sel {
                let (fk, gk) = crate::fields::part_sdf_grad(
                    model,
                    Some(caches),
                    &stored.parts,
                    k,
                    &pat.frames[k],
                    x,
                    pat.time,
                    &mut ws,
                );
                f += fk / m;
                g = math::add(g, math::scale(gk, 1.0 / m));
            }
            total += w.l1 * refine_body_term(f, config.eta) / (nv * frame_ids.len() as f64);
            if with_grad {
                let s = w.l1 * refine_body_term_bar(f, config.eta) / (nv * frame_ids.len() as f64);
                vertex_ids.push(vi);
                vertex_bar.push(math::scale(g, s));
            }
        }

        // observation loss through body surface samples
        let obs_cloud = &observation.frames[fi];
        if !obs_cloud.is_empty() {
            let mut obs_rng = crate::util::DetRng::from_parts(&[iter_seed, fi as u64, 0x6f]);
            let n_obs = 600.min(obs_cloud.len());
            let obs_pick: Vec<Vec3> = (0..n_obs)
                .map(|_| obs_cloud.points[obs_rng.below(obs_cloud.len())])
                .collect();
            let samples: Vec<Vec3> = surface_anchors
                .iter()
                .map(|&(face, bary)| {
                    let f = template.rest_mesh.faces[face];
                    let mut p = [0.0; 3];
                    for (slot, &vi) in f.iter().enumerate() {
                        p = math::add(p, math::scale(mesh.vertices[vi as usize], bary[slot]));
                    }
                    p
                })
                .collect();
            let sample_tree = crate::geometry::KdTree::build(&samples);
            let obs_tree = crate::geometry::KdTree::build(&obs_pick);
            let frame_scale = 1.0 / frame_ids.len() as f64;
            let mut sample_bar: Vec<Vec3> = vec![[0.0; 3]; samples.len()];
            // observed -> body surface
            let dir_w = match observation.kind {
                ObservationKind::Complete => 0.5,
                ObservationKind::Partial => 1.0,
            };
            let mut acc = 0.0;
            for &q in &obs_pick {
                let nn = sample_tree.nearest(q);
                acc += nn.dist * nn.dist;
                if with_grad {
                    let c = 2.0 * w.l2 * dir_w * frame_scale / obs_pick.len() as f64;
                    sample_bar[nn.index] = math::add(
                        sample_bar[nn.index],
                        math::scale(math::sub(samples[nn.index], q), c),
                    );
                }
            }
            total += w.l2 * dir_w * frame_scale * acc / obs_pick.len() as f64;
            if observation.kind == ObservationKind::Complete {
                let mut acc2 = 0.0;
                for (si, &p) in samples.iter().enumerate() {
                    let nn = obs_tree.nearest(p);
                    acc2 += nn.dist * nn.dist;
                    if with_grad {
                        let c = 2.0 * w.l2 * 0.5 * frame_scale / samples.len() as f64;
                        sample_bar[si] = math::add(
                            sample_bar[si],
                            math::scale(math::sub(p, obs_pick[nn.index]), c),
                        );
                    }
                }
                total += w.l2 * 0.5 * frame_scale * acc2 / samples.len() as f64;
            }
            if with_grad {
                // distribute sample adjoints to the vertices by barycentrics
                for (&(face, bary), bar) in surface_anchors.iter().zip(&sample_bar) {
                    if *bar == [0.0; 3] {
                        continue;
                    }
                    let f = template.rest_mesh.faces[face];
                    for (slot, &vi) in f.iter().enumerate() {
                        vertex_ids.push(vi as usize);
                        vertex_bar.push(math::scale(*bar, bary[slot]));
                    }
                }
            }
        }

        if with_grad && !vertex_ids.is_empty() {
            let lg = lbs_backward(
                template,
                &params.shape,
                &params.poses[fi],
                &vertex_ids,
                &vertex_bar,
            )?;
            for (i, g) in lg.shape.iter().enumerate() {
                grad[i] += g;
            }
            for (i, g) in lg.pose.iter().enumerate() {
                grad[b + fi * pj + i] += g;
            }
            let toff = b + frames * pj + 3 * fi;
            for i in 0..3 {
                grad[toff + i] += lg.translation[i];
            }
        }
    }

    // parameter regularization ||V - V_init||_2
    let diff: Vec<f64> = flat.iter().zip(flat_init).map(|(a, b)| a - b).collect();
    let reg = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    total += w.l3 * reg;
    if with_grad && reg > 1e-12 {
        for (g, d) in grad.iter_mut().zip(&diff) {
            *g += w.l3 * d / reg;
        }
    }

    // temporal second-difference smoothness over poses
    if frames >= 3 {
        for t in 1..frames - 1 {
            for c in 0..pj {
                let d = flat[b + (t + 1) * pj + c] - 2.0 * flat[b + t * pj + c]
                    + flat[b + (t - 1) * pj + c];
                total += config.lambda_smooth * d * d;
                if with_grad {
                    grad[b + (t + 1) * pj + c] += 2.0 * config.lambda_smooth * d;
                    grad[b + t * pj + c] -= 4.0 * config.lambda_smooth * d;
                    grad[b + (t - 1) * pj + c] += 2.0 * config.lambda_smooth * d;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Alternating inner-body refining: optimize the body parameters against the
/// frozen fitted field, re-track the parts on the refined body, re-fit the
/// codes, and keep a round's result only if the refine objective improved.
pub fn refine_body(
    ck: &Checkpoint,
    template: &BodyTemplate,
    initial: &BodyParams,
    observation: &SequenceObservation,
    fit: &mut FitResult,
    config: &RunConfig,
) -> Result<(BodyParams, RefineStats), OptimError> {
    let model = FieldModel::from_weights(ck.specs.clone(), ck.weights.clone());
    let frames = observation.frames.len();
    assert_eq!(initial.num_frames(), frames);
    let flat_init = flatten_params(initial);
    let mut flat = flat_init.clone();
    let mut round_losses = Vec::new();
    let body_loss_before = mean_body_loss(&model, &fit.stored, template, initial, config)?;

    // fixed body-surface sample anchors (face, barycentric) for L_obs
    let anchors: Vec<(usize, [f64; 3])> = crate::geometry::sample_surface_with_provenance(
        &template.rest_mesh,
        config.refine_surface_samples,
        crate::util::derive_seed(&[config.seed, 0x726566]),
    )?
    .into_iter()
    .map(|s| (s.face, s.bary))
    .collect();

    for round in 0..config.refine_rounds {
        let caches = PartCodeCaches::build(&model, &fit.stored.parts);
        let eval_frames: Vec<usize> = (0..frames).collect();
        let eval_seed = crate::util::derive_seed(&[config.seed, 0x7265, round as u64]);
        let (before, _) = refine_loss_and_grad(
            &model,
            &caches,
            &fit.stored,
            template,
            &flat,
            &flat_init,
            observation,
            &anchors,
            config,
            eval_seed,
            &eval_frames,
            false,
        )?;
        let mut candidate = flat.clone();
        let mut adam = AdamState::new(flat.len());
        for it in 0..config.refine_iterations as u64 {
            let frame_ids = frame_ids_for_step(it, config.frames_per_step.min(frames), frames);
            let (loss, grad) = refine_loss_and_grad(
                &model,
                &caches,
                &fit.stored,
                template,
                &candidate,
                &flat_init,
                observation,
                &anchors,
                config,
                crate::util::derive_seed(&[config.seed, 0x7269, round as u64, it]),
                &frame_ids,
                true,
            )?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::DivergedLoss { step: it });
            }
            adam_step(&mut candidate, &grad, &mut adam, config.refine_lr);
        }
        let (after, _) = refine_loss_and_grad(
            &model,
            &caches,
            &fit.stored,
            template,
            &candidate,
            &flat_init,
            observation,
            &anchors,
            config,
            eval_seed,
            &eval_frames,
            false,
        )?;
        // monotone accept
        if after <= before {
            flat = candidate;
            round_losses.push(after);
        } else {
            round_losses.push(before);
        }

        // re-track the existing anchors on the refined body and re-fit codes
        let params = unflatten_params(&flat, frames);
        let body_seq = pose_sequence(template, &params)?;
        let times: Vec<f64> = (0..frames)
            .map(|f| f as f64 / (frames - 1).max(1) as f64)
            .collect();
        let anchors_now: Vec<crate::parts::PartAnchor> =
            fit.stored.parts.parts.iter().map(|p| p.anchor).collect();
        let tracked = track_parts(&anchors_now, &body_seq, &times)?;
        fit.stored.parts.parts = tracked;
        fit_codes(
            ck,
            &mut fit.stored,
            observation,
            &body_seq,
            &times,
            config,
            config.refine_refit_iterations,
            0x7266 + round as u64,
        )?;
        fit.body_params = params;
    }

    let refined = unflatten_params(&flat, frames);
    let body_loss_after = mean_body_loss(&model, &fit.stored, template, &refined, config)?;
    Ok((
        refined,
        RefineStats {
            body_loss_before,
            body_loss_after,
            round_losses,
        },
    ))
}

// ---------------------------------------------------------------------------
// Texture fitting
// ---------------------------------------------------------------------------

/// Optimizes the texture network weights and per-part texture codes against
/// a colored observation (no pretraining; per-sequence).
pub fn fit_texture(
    model: &mut FieldModel,
    stored: &mut StoredSequence,
    adam_weights: &mut AdamState,
    observation: &SequenceObservation,
    config: &RunConfig,
) -> Result<(), OptimError> {
    if observation.frames.iter().any(|f| f.colors.is_none()) {
        return Err(OptimError::MissingColors);
    }
    let frames = observation.frames.len();
    let obs_frame_of: Vec<usize> = observation
        .times
        .iter()
        .map(|t| {
            stored
                .parts
                .times
                .iter()
                .position(|u| (u - t).abs() < 1e-9)
                .expect("observed time on tracked grid")
        })
        .collect();
    let pats: Vec<crate::parts::PartsAtTime> = obs_frame_of
        .iter()
        .map(|&fi| stored.parts.at_index(fi))
        .collect();
    let m = config.samples_per_frame;
    for it in 0..config.texture_iterations as u64 {
        let oi = (it as usize) % frames;
        let cloud = &observation.frames[oi];
        let colors = cloud.colors.as_ref().expect("checked above");
        let pat = &pats[oi];
        let mut rng = crate::util::DetRng::from_parts(&[config.seed, 0x746669, it]);
        let picks: Vec<usize> = (0..m.min(cloud.len())).map(|_| rng.below(cloud.len())).collect();
        let n_pts = picks.len() as f64;

        let partials = crate::util::par_chunks(picks.len(), 64, |range| {
            let mut w_grad = vec![0.0; model.texture.n_params];
            let mut c_grad = vec![0.0; stored.parts.code_t.len()];
            let mut loss = 0.0;
            let mut traces: Vec<crate::fields::TextureTrace> = (0..config.n_fit)
                .map(|_| crate::fields::TextureTrace::new(&model.texture))
                .collect();
            for pi in range {
                let idx = picks[pi];
                let x = cloud.points[idx];
                let gt = colors[idx];
                let sel = pat.covering_parts(
                    x,
                    config.n_fit,
                    crate::util::derive_seed(&[config.seed, 0x7478, it, pi as u64]),
                );
                let msel = sel.len() as f64;
                let mut mean = [0.0; 3];
                for (si, &k) in sel.iter().enumerate() {
                    let x_loc = pat.frames[k].to_local(x);
                    let coords = [x_loc[0], x_loc[1], x_loc[2], pat.time];
                    let rgb = model.texture.forward(
                        &model.weights.texture,
                        stored.parts.code_t_of(k),
                        &coords,
                        &mut traces[si],
                    );
                    for c in 0..3 {
                        mean[c] += rgb[c] / msel;
                    }
                }
                let mut rgb_bar = [0.0; 3];
                for c in 0..3 {
                    loss += (mean[c] - gt[c]).abs() / (3.0 * n_pts);
                    rgb_bar[c] = (mean[c] - gt[c]).signum() / (3.0 * n_pts * msel);
                }
                for (si, &k) in sel.iter().enumerate() {
                    let cd = stored.parts.code_dim;
                    model.texture.backward(
                        &model.weights.texture,
                        stored.parts.code_t_of(k),
                        rgb_bar,
                        &traces[si],
                        Some(&mut w_grad),
                        Some(&mut c_grad[k * cd..(k + 1) * cd]),
                    );
                }
            }
            (loss, w_grad, c_grad)
        });
        let mut loss = 0.0;
        let mut w_grad = vec![0.0; model.texture.n_params];
        let mut c_grad = vec![0.0; stored.parts.code_t.len()];
        for (l, wg, cg) in &partials {
            loss += l;
            crate::util::add_assign(&mut w_grad, wg);
            crate::util::add_assign(&mut c_grad, cg);
        }
        if !loss.is_finite() {
            return Err(OptimError::DivergedLoss { step: it });
        }
        adam_step(&mut model.weights.texture, &w_grad, adam_weights, config.texture_lr);
        adam_step(&mut stored.parts.code_t, &c_grad, &mut stored.adam_t, config.texture_lr);
    }
    Ok(())
}

/// Poses the body at an arbitrary normalized time by linear interpolation of
/// the per-frame parameters (clamped outside the grid).
pub fn pose_at_time(
    template: &BodyTemplate,
    params: &BodyParams,
    t: f64,
) -> Result<TriMesh, OptimError> {
    let l = params.num_frames();
    let grid = (l - 1).max(1) as f64;
    let ft = (t * grid).clamp(0.0, grid as f64);
    let lo = (ft.floor() as usize).min(l - 1);
    let hi = (lo + 1).min(l - 1);
    let a = ft - lo as f64;
    let pose: Vec<f64> = params.poses[lo]
        .iter()
        .zip(&params.poses[hi])
        .map(|(x, y)| x * (1.0 - a) + y * a)
        .collect();
    let tr = math::lerp(params.translations[lo], params.translations[hi], a);
    Ok(pose_body(template, &params.shape, &pose, tr)?)
}

// ---------------------------------------------------------------------------
// Long sequences: sliding window with 50% overlap and code blending
// ---------------------------------------------------------------------------

/// Fit of a sequence longer than the configured window length: windows of
/// `config.frames` frames with 50% overlap share one part layout (anchors
/// sampled on the first window) and blend codes linearly inside overlaps.
#[derive(Clone, Debug)]
pub struct WindowFit {
    pub window_starts: Vec<usize>,
    pub fits: Vec<FitResult>,
    pub window_len: usize,
    pub total_frames: usize,
}

impl WindowFit {
    /// Windows covering a global frame with their blend weights.
    pub fn blend_weights(&self, frame: usize) -> Vec<(usize, f64)> {
        let mut hits: Vec<(usize, f64)> = Vec::new();
        for (wi, &start) in self.window_starts.iter().enumerate() {
            if frame >= start && frame < start + self.window_len {
                hits.push((wi, frame as f64 - start as f64));
            }
        }
        match hits.len() {
            1 => vec![(hits[0].0, 1.0)],
            2 => {
                // linear ramp across the overlap: the later window fades in
                let (w0, _) = hits[0];
                let (w1, _) = hits[1];
                let overlap_start = self.window_starts[w1];
                let overlap_len =
                    (self.window_starts[w0] + self.window_len - overlap_start).max(1);
                let alpha = (frame - overlap_start) as f64 / overlap_len as f64;
                vec![(w0, 1.0 - alpha), (w1, alpha)]
            }
            _ => panic!("frame {frame} covered by {} windows", hits.len()),
        }
    }

    /// Part set with blended codes plus the local time for extraction at a
    /// global frame.
    pub fn parts_for_frame(&self, frame: usize) -> (PartSet, f64, usize) {
        let blend = self.blend_weights(frame);
        let (w0, _) = blend[0];
        let base = &self.fits[w0].stored.parts;
        let mut parts = base.clone();
        parts.code_m.fill(0.0);
        parts.code_s.fill(0.0);
        parts.code_t.fill(0.0);
        for &(wi, a) in &blend {
            let p = &self.fits[wi].stored.parts;
            for (dst, src) in parts.code_m.iter_mut().zip(&p.code_m) {
                *dst += a * src;
            }
            for (dst, src) in parts.code_s.iter_mut().zip(&p.code_s) {
                *dst += a * src;
            }
            for (dst, src) in parts.code_t.iter_mut().zip(&p.code_t) {
                *dst += a * src;
            }
        }
        let local = frame - self.window_starts[w0];
        let t = local as f64 / (self.window_len - 1).max(1) as f64;
        (parts, t, w0)
    }
}

/// Fits an observation longer than `config.frames` with 50%-overlap windows.
pub fn fit_long_sequence(
    ck: &Checkpoint,
    template: &BodyTemplate,
    body_params: &BodyParams,
    observation: &SequenceObservation,
    config: &RunConfig,
    iterations: usize,
) -> Result<WindowFit, OptimError> {
    let total = observation.frames.len();
    let l = config.frames;
    assert!(total > l, "use fit_sequence for short sequences");
    let hop = (l / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + l < total).collect();
    starts.push(total - l);
    let mut anchors: Option<Vec<crate::parts::PartAnchor>> = None;
    let mut fits = Vec::new();
    for &start in &starts {
        let ids: Vec<usize> = (start..start + l).collect();
        let window_obs = SequenceObservation {
            frames: ids.iter().map(|&i| observation.frames[i].clone()).collect(),
            times: (0..l).map(|f| f as f64 / (l - 1).max(1) as f64).collect(),
            kind: observation.kind,
        };
        let window_params = BodyParams {
            shape: body_params.shape.clone(),
            poses: ids.iter().map(|&i| body_params.poses[i].clone()).collect(),
            translations: ids.iter().map(|&i| body_params.translations[i]).collect(),
        };
        let body_seq = pose_sequence(template, &window_params)?;
        let times = window_obs.times.clone();
        let anchor_list = match &anchors {
            Some(a) => a.clone(),
            None => {
                let a = crate::parts::sample_part_centers(
                    &body_seq[0],
                    config.part_radius,
                    crate::util::derive_seed(&[config.seed, 0xf17, 0x7061]),
                );
                anchors = Some(a.clone());
                a
            }
        };
        let tracked = track_parts(&anchor_list, &body_seq, &times)?;
        let k = tracked.len();
        let mut parts = PartSet {
            radius: config.part_radius,
            parts: tracked,
            times: times.clone(),
            code_dim: config.code_dim,
            code_m: vec![0.0; k * config.code_dim],
            code_s: vec![0.0; k * config.code_dim],
            code_t: vec![0.0; k * config.code_dim],
        };
        parts.init_codes(0.01, crate::util::derive_seed(&[config.seed, 0xf17, 0x636f, start as u64]));
        let mut stored = StoredSequence::new(format!("window{start}"), parts);
        let curve = fit_codes(
            ck,
            &mut stored,
            &window_obs,
            &body_seq,
            &times,
            config,
            iterations,
            0xf17 + 1 + start as u64,
        )?;
        fits.push(FitResult {
            stored,
            body_params: window_params,
            loss_curve: curve,
        });
    }
    Ok(WindowFit {
        window_starts: starts,
        fits,
        window_len: l,
        total_frames: total,
    })
}

/// Code interpolation between two fits that share the same checkpoint and
/// part layout: per-part linear interpolation of latent codes plus linear
/// interpolation of the body parameters.
pub fn interp_latent(
    a: &FitResult,
    b: &FitResult,
    alpha: f64,
) -> Result<(StoredSequence, BodyParams), OptimError> {
    let (pa, pb) = (&a.stored.parts, &b.stored.parts);
    if pa.k() != pb.k() || pa.code_dim != pb.code_dim {
        return Err(OptimError::Checkpoint(
            "fits do not share part topology".into(),
        ));
    }
    let mut out = a.stored.clone();
    let lerp_codes = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(u, v)| u * (1.0 - alpha) + v * alpha).collect()
    };
    out.parts.code_m = lerp_codes(&pa.code_m, &pb.code_m);
    out.parts.code_s = lerp_codes(&pa.code_s, &pb.code_s);
    out.parts.code_t = lerp_codes(&pa.code_t, &pb.code_t);
    let (ba, bb) = (&a.body_params, &b.body_params);
    assert_eq!(ba.num_frames(), bb.num_frames());
    let params = BodyParams {
        shape: ba
            .shape
            .iter()
            .zip(&bb.shape)
            .map(|(x, y)| x * (1.0 - alpha) + y * alpha)
            .collect(),
        poses: ba
            .poses
            .iter()
            .zip(&bb.poses)
            .map(|(px, py)| px.iter().zip(py).map(|(x, y)| x * (1.0 - alpha) + y * alpha).collect())
            .collect(),
        translations: ba
            .translations
            .iter()
            .zip(&bb.translations)
            .map(|(x, y)| math::lerp(*x, *y, alpha))
            .collect(),
    };
    Ok((out, params))
}
