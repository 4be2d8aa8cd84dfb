//! Synthetic dynamic clothed-proxy sequences with ground-truth inner bodies:
//! smooth random joint-angle splines pose the body, the clothed surface is a
//! normal offset of the body with a traveling band-limited wrinkle field,
//! and observations are sampled or depth-rendered from the result.

mod camera;

pub use camera::{
    backproject, camera_rig, orbit_camera, render_depth, Camera, DepthImage, RigMode,
    DEPTH_EDGE_LIMIT, DEPTH_RES,
};

use crate::body::{
    build_template, pose_sequence, BodyError, BodyParams, BodyPreset, BodyTemplate, NUM_JOINTS,
    NUM_SHAPE,
};
use crate::geometry::{
    read_obj, sample_surface, write_obj, GeometryError, MeshDistanceQuery, OrientedPointCloud,
    TriMesh,
};
use crate::math::{self, Vec3};
use crate::objectives::ObservationKind;
use crate::util::DetRng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("body: {0}")]
    Body(#[from] BodyError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

/// Minimum signed clearance enforced between clothed vertices and the body.
pub const MIN_CLEARANCE: f64 = 0.0035;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MotionPreset {
    Still,
    Sway,
    Wave,
}

impl MotionPreset {
    pub fn parse(s: &str) -> Option<MotionPreset> {
        match s {
            "still" => Some(MotionPreset::Still),
            "sway" => Some(MotionPreset::Sway),
            "wave" => Some(MotionPreset::Wave),
            _ => None,
        }
    }

    fn gain(self) -> f64 {
        match self {
            MotionPreset::Still => 0.0,
            MotionPreset::Sway => 0.7,
            MotionPreset::Wave => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ColorStyle {
    /// Red left half, blue right half (in the rest pose).
    TwoToneLeftRight,
    /// Shirt/pants split at the pelvis height.
    TwoToneTopBottom,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GenOptions {
    pub body_preset: BodyPreset,
    pub motion: MotionPreset,
    pub frames: usize,
    /// Base cloth offset along the body normal (meters).
    pub offset: f64,
    /// Wrinkle displacement bound (meters).
    pub wrinkle_amp: f64,
    pub colors: Option<ColorStyle>,
    /// Number of random patches removed from the clothed mesh (raw-scan
    /// emulation); 0 keeps it watertight.
    pub holes: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            body_preset: BodyPreset::Desk,
            motion: MotionPreset::Sway,
            frames: 17,
            offset: 0.012,
            wrinkle_amp: 0.006,
            colors: None,
            holes: 0,
        }
    }
}

/// A generated sequence: template, parameters, posed bodies and clothed
/// ground-truth meshes (fixed topology each).
#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub template: BodyTemplate,
    pub params: BodyParams,
    pub body: Vec<TriMesh>,
    pub clothed: Vec<TriMesh>,
    pub times: Vec<f64>,
    pub seed: u64,
    pub options: GenOptions,
}

impl SynthSequence {
    pub fn frames(&self) -> usize {
        self.body.len()
    }
}

/// Per-joint motion amplitude (radians) for the spline generator.
fn joint_amplitude(j: usize) -> f64 {
    match j {
        0 => 0.06,       // pelvis orientation
        1 | 2 => 0.10,   // spine, chest
        3 => 0.15,       // head
        4 | 7 => 0.30,   // shoulders
        5 | 8 => 0.40,   // elbows
        6 | 9 => 0.20,   // wrists
        10 | 13 => 0.25, // hips
        11 | 14 => 0.35, // knees
        _ => 0.15,       // ankles
    }
}

fn motion_params(frames: usize, preset: MotionPreset, scale: f64, rng: &mut DetRng) -> BodyParams {
    let gain = preset.gain();
    // two low-frequency harmonics per joint axis, random phase and weight
    let mut coef = vec![[0.0f64; 4]; 3 * NUM_JOINTS];
    for (i, c) in coef.iter_mut().enumerate() {
        let amp = joint_amplitude(i / 3) * gain;
        c[0] = amp * rng.range(0.3, 1.0);
        c[1] = rng.range(0.0, 2.0 * std::f64::consts::PI);
        c[2] = amp * rng.range(0.0, 0.5);
        c[3] = rng.range(0.0, 2.0 * std::f64::consts::PI);
    }
    let drift: Vec3 = [
        0.05 * scale * gain * rng.normal(),
        0.0,
        0.05 * scale * gain * rng.normal(),
    ];
    let mut shape = vec![0.0; NUM_SHAPE];
    for s in &mut shape {
        *s = 0.5 * rng.normal();
    }
    let mut poses = Vec::with_capacity(frames);
    let mut translations = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / (frames - 1).max(1) as f64;
        let mut pose = vec![0.0; 3 * NUM_JOINTS];
        for (i, p) in pose.iter_mut().enumerate() {
            let c = coef[i];
            // zero at t = 0 so the canonical frame is the rest-ish pose
            *p = c[0] * ((2.0 * std::f64::consts::PI * 0.5 * t + c[1]).sin() - c[1].sin())
                + c[2] * ((2.0 * std::f64::consts::PI * 1.1 * t + c[3]).sin() - c[3].sin());
        }
        poses.push(pose);
        translations.push(math::scale(drift, t));
    }
    BodyParams {
        shape,
        poses,
        translations,
    }
}

/// Traveling wrinkle bands: directions, wavenumbers, speeds and phases.
struct WrinkleField {
    bands: Vec<(Vec3, f64, f64, f64)>,
    amp: f64,
}

impl WrinkleField {
    fn new(amp: f64, scale: f64, rng: &mut DetRng) -> WrinkleField {
        let bands = (0..8)
            .map(|_| {
                let dir = math::normalize([rng.normal(), rng.normal(), rng.normal()]);
                let wavelength = rng.range(0.25, 0.5) * scale;
                let k = 2.0 * std::f64::consts::PI / wavelength;
                let speed = rng.range(1.0, 3.5);
                let phase = rng.range(0.0, 2.0 * std::f64::consts::PI);
                (dir, k, speed, phase)
            })
            .collect();
        WrinkleField { bands, amp }
    }

    /// Displacement at a rest-pose position, time t, pose magnitude m.
    fn eval(&self, rest: Vec3, t: f64, pose_mag: f64) -> f64 {
        let mut sum = 0.0;
        for &(dir, k, speed, phase) in &self.bands {
            sum += (k * math::dot(dir, rest) + speed * t + phase + 0.8 * pose_mag).sin();
        }
        self.amp * (sum / 2.0).tanh()
    }
}

/// Generates a deterministic clothed sequence with its ground-truth body.
pub fn generate_sequence(seed: u64, options: &GenOptions) -> Result<SynthSequence, SynthError> {
    let scale = options.body_preset.scale();
    let template = build_template(options.body_preset, crate::util::derive_seed(&[seed, 0x74]));
    let mut rng = DetRng::from_parts(&[seed, 0x67656e]);
    let params = motion_params(options.frames, options.motion, scale, &mut rng);
    let body = pose_sequence(&template, &params)?;
    let times: Vec<f64> = (0..options.frames)
        .map(|f| f as f64 / (options.frames - 1).max(1) as f64)
        .collect();

    // rest-pose clothed mesh: the shaped rest body offset along its
    // smoothed normals, optional holes
    let shaped_rest = template.shaped_rest(&params.shape)?;
    let rest_normals =
        crate::geometry::smooth_vertex_normals_of(&shaped_rest, &template.rest_mesh.faces);
    let rest_clothed: Vec<Vec3> = shaped_rest
        .iter()
        .zip(&rest_normals)
        .map(|(&v, &n)| math::add(v, math::scale(n, options.offset)))
        .collect();
    let mut clothed_faces = template.rest_mesh.faces.clone();
    if options.holes > 0 {
        let mesh = TriMesh::new(rest_clothed.clone(), clothed_faces.clone())?;
        let mut hole_rng = DetRng::from_parts(&[seed, 0x686f6c65]);
        let hole_r = 0.06 * scale;
        let mut removed = vec![false; clothed_faces.len()];
        for _ in 0..options.holes {
            let f = hole_rng.below(clothed_faces.len());
            let c = mesh.face_centroid(f);
            for (fi, r) in removed.iter_mut().enumerate() {
                if math::dist(mesh.face_centroid(fi), c) < hole_r {
                    *r = true;
                }
            }
        }
        clothed_faces = clothed_faces
            .into_iter()
            .zip(&removed)
            .filter(|(_, &r)| !r)
            .map(|(f, _)| f)
            .collect();
    }

    let wrinkles = WrinkleField::new(options.wrinkle_amp, scale, &mut rng);
    let j = template.joints.len();
    let mut clothed = Vec::with_capacity(options.frames);
    for (fi, t) in times.iter().enumerate() {
        // skin the clothed rest vertices with the body weights
        let transforms = crate::body::skinning_transforms(&template, &params.poses[fi]);
        let translation = params.translations[fi];
        let mut verts: Vec<Vec3> = rest_clothed
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
        let mut frame_mesh = TriMesh::new(verts.clone(), clothed_faces.clone())?;
        // wrinkle displacement along the posed normals
        let pose_mag = params.poses[fi].iter().map(|x| x.abs()).sum::<f64>() / (3 * j) as f64;
        let posed_normals = frame_mesh.smooth_vertex_normals();
        for (vi, v) in verts.iter_mut().enumerate() {
            let d = wrinkles.eval(template.rest_mesh.vertices[vi], *t, pose_mag * 10.0);
            *v = math::add(*v, math::scale(posed_normals[vi], d));
        }
        // clearance pass: keep every clothed vertex at least MIN_CLEARANCE
        // outside the posed body
        let body_query = MeshDistanceQuery::new(&body[fi]);
        for _ in 0..24 {
            let mut violations = 0usize;
            for v in verts.iter_mut() {
                let hit = body_query.closest(*v);
                let n = body[fi].face_normal(hit.face);
                let signed = math::dot(math::sub(*v, hit.point), n).signum() * hit.dist;
                if signed < MIN_CLEARANCE {
                    violations += 1;
                    // translate (never snap, so nearby vertices keep their
                    // spread): along the distance gradient when outside,
                    // along the nearest face normal when inside
                    let dir = if signed > 1e-9 {
                        math::scale(math::sub(*v, hit.point), 1.0 / hit.dist)
                    } else {
                        n
                    };
                    *v = math::add(*v, math::scale(dir, 1.02 * (MIN_CLEARANCE - signed)));
                }
            }
            if violations == 0 {
                break;
            }
        }
        frame_mesh = TriMesh::new(verts, clothed_faces.clone())?;
        if let Some(style) = options.colors {
            let colors: Vec<[f64; 3]> = template
                .rest_mesh
                .vertices
                .iter()
                .map(|v| match style {
                    ColorStyle::TwoToneLeftRight => {
                        if v[0] >= 0.0 {
                            [0.85, 0.15, 0.1]
                        } else {
                            [0.1, 0.2, 0.85]
                        }
                    }
                    ColorStyle::TwoToneTopBottom => {
                        if v[1] >= template.joints[0][1] {
                            [0.85, 0.15, 0.1]
                        } else {
                            [0.1, 0.2, 0.85]
                        }
                    }
                })
                .collect();
            frame_mesh = frame_mesh.with_colors(colors);
        }
        clothed.push(frame_mesh);
    }

    Ok(SynthSequence {
        template,
        params,
        body,
        clothed,
        times,
        seed,
        options: options.clone(),
    })
}

/// Per-frame oriented point clouds observing a sequence.
#[derive(Clone, Debug)]
pub struct SequenceObservation {
    pub frames: Vec<OrientedPointCloud>,
    pub times: Vec<f64>,
    pub kind: ObservationKind,
}

impl SequenceObservation {
    /// Restriction to a frame subset (for temporal inter-/extrapolation).
    pub fn subset(&self, frame_ids: &[usize]) -> SequenceObservation {
        SequenceObservation {
            frames: frame_ids.iter().map(|&i| self.frames[i].clone()).collect(),
            times: frame_ids.iter().map(|&i| self.times[i]).collect(),
            kind: self.kind,
        }
    }
}

/// Samples a complete observation at the given surface density (points per
/// square meter of clothed surface).
pub fn sample_observation(
    seq: &SynthSequence,
    density: f64,
    seed: u64,
) -> Result<SequenceObservation, SynthError> {
    let mut frames = Vec::with_capacity(seq.frames());
    for (fi, mesh) in seq.clothed.iter().enumerate() {
        let count = (density * mesh.total_area()).round() as usize;
        let cloud = sample_surface(mesh, count, crate::util::derive_seed(&[seed, fi as u64]))?
            .with_time(seq.times[fi]);
        frames.push(cloud);
    }
    Ok(SequenceObservation {
        frames,
        times: seq.times.clone(),
        kind: ObservationKind::Complete,
    })
}

/// Renders the clothed sequence to depth and back-projects each frame into a
/// partial world-space observation. Returns the clouds plus the depth images
/// and cameras for archiving.
pub fn depth_observation(
    seq: &SynthSequence,
    mode: RigMode,
    focal: Option<f64>,
) -> (SequenceObservation, Vec<DepthImage>, Vec<Camera>) {
    let bbox = crate::geometry::Aabb::from_points(&seq.clothed[0].vertices).unwrap();
    let center = math::scale(math::add(bbox.min, bbox.max), 0.5);
    let diag = math::norm(bbox.extent());
    let distance = diag * 1.8;
    // default focal makes the body fill most of the frame
    let focal = focal.unwrap_or(0.85 * DEPTH_RES as f64 * distance / diag);
    let cameras = camera_rig(mode, seq.frames(), center, distance, focal);
    let mut frames = Vec::with_capacity(seq.frames());
    let mut depths = Vec::with_capacity(seq.frames());
    for (fi, mesh) in seq.clothed.iter().enumerate() {
        let depth = render_depth(mesh, &cameras[fi]);
        let cloud = backproject(&depth, &cameras[fi]).with_time(seq.times[fi]);
        frames.push(cloud);
        depths.push(depth);
    }
    (
        SequenceObservation {
            frames,
            times: seq.times.clone(),
            kind: ObservationKind::Partial,
        },
        depths,
        cameras,
    )
}

/// On-disk layout of a generated sequence.
pub fn write_sequence(seq: &SynthSequence, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (i, mesh) in seq.clothed.iter().enumerate() {
        write_obj(mesh, &dir.join(format!("clothed_{i:03}.obj")))?;
    }
    for (i, mesh) in seq.body.iter().enumerate() {
        write_obj(mesh, &dir.join(format!("body_{i:03}.obj")))?;
    }
    crate::body::write_params(&seq.params, &dir.join("params.json"))?;
    crate::body::write_template(&seq.template, &dir.join("template.l4db"))?;
    let meta = serde_json::json!({
        "version": 1,
        "seed": seq.seed,
        "frames": seq.frames(),
        "times": seq.times,
        "options": seq.options,
        "clothed_area_mean": seq.clothed.iter().map(|m| m.total_area()).sum::<f64>() / seq.frames() as f64,
    });
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SynthSequence, SynthError> {
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: serde_json::Value =
        serde_json::from_str(&meta_text).map_err(|e| SynthError::Parse(e.to_string()))?;
    let frames = meta["frames"]
        .as_u64()
        .ok_or_else(|| SynthError::Parse("meta.frames missing".into()))? as usize;
    let seed = meta["seed"].as_u64().unwrap_or(0);
    let times: Vec<f64> = serde_json::from_value(meta["times"].clone())
        .map_err(|e| SynthError::Parse(e.to_string()))?;
    let options: GenOptions = serde_json::from_value(meta["options"].clone())
        .map_err(|e| SynthError::Parse(e.to_string()))?;
    let template = crate::body::read_template(&dir.join("template.l4db"))?;
    let params = crate::body::read_params(&dir.join("params.json"))?;
    let mut clothed = Vec::with_capacity(frames);
    let mut body = Vec::with_capacity(frames);
    for i in 0..frames {
        clothed.push(read_obj(&dir.join(format!("clothed_{i:03}.obj")))?);
        body.push(read_obj(&dir.join(format!("body_{i:03}.obj")))?);
    }
    Ok(SynthSequence {
        template,
        params,
        body,
        clothed,
        times,
        seed,
        options,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_options() -> GenOptions {
        GenOptions {
            frames: 5,
            ..GenOptions::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sequence(11, &quick_options()).unwrap();
        let b = generate_sequence(11, &quick_options()).unwrap();
        for (x, y) in a.clothed.iter().zip(&b.clothed) {
            assert_eq!(x.vertices, y.vertices);
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_wrinkle_is_offset_body() {
        let opts = GenOptions {
            wrinkle_amp: 0.0,
            motion: MotionPreset::Still,
            frames: 2,
            ..GenOptions::default()
        };
        let seq = generate_sequence(3, &opts).unwrap();
        // with no motion and no wrinkles the clothed mesh is the rest body
        // offset along normals; vertex distance to the body is ~offset
        let query = MeshDistanceQuery::new(&seq.body[0]);
        let mut errs: Vec<f64> = seq.clothed[0]
            .vertices
            .iter()
            .map(|v| (query.closest(*v).dist - opts.offset).abs())
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // away from creases the construction is the exact offset; crease
        // vertices are pulled to the clearance floor
        let median = errs[errs.len() / 2];
        let p98 = errs[errs.len() * 98 / 100];
        assert!(median < 0.1 * opts.offset, "median offset error {median}");
        assert!(p98 < 0.8 * opts.offset, "p98 offset error {p98}");
    }

    #[test]
    fn clearance_holds_across_frames() {
        let seq = generate_sequence(7, &quick_options()).unwrap();
        for (body, clothed) in seq.body.iter().zip(&seq.clothed) {
            let query = MeshDistanceQuery::new(body);
            let mut min_clear = f64::INFINITY;
            for v in &clothed.vertices {
                min_clear = min_clear.min(query.signed_distance(*v));
            }
            assert!(min_clear > 0.002, "clearance {min_clear}");
        }
    }

    #[test]
    fn clothed_topology_fixed_and_outside() {
        let seq = generate_sequence(13, &quick_options()).unwrap();
        for c in &seq.clothed[1..] {
            assert_eq!(c.faces, seq.clothed[0].faces);
        }
        for b in &seq.body[1..] {
            assert_eq!(b.faces, seq.body[0].faces);
        }
    }

    #[test]
    fn observation_density_and_consistency() {
        let seq = generate_sequence(17, &quick_options()).unwrap();
        let density = 2000.0;
        let obs = sample_observation(&seq, density, 5).unwrap();
        for (fi, cloud) in obs.frames.iter().enumerate() {
            let expected = density * seq.clothed[fi].total_area();
            assert!((cloud.len() as f64 - expected).abs() <= 1.0);
            // observed points lie on the clothed mesh
            let query = MeshDistanceQuery::new(&seq.clothed[fi]);
            for p in cloud.points.iter().step_by(97) {
                assert!(query.closest(*p).dist < 1e-9);
            }
        }
        let empty = sample_observation(&seq, 0.0, 5).unwrap();
        assert!(empty.frames.iter().all(|c| c.is_empty()));
    }

    #[test]
    fn holes_remove_faces_but_keep_topology_constant() {
        let opts = GenOptions {
            holes: 3,
            frames: 3,
            ..GenOptions::default()
        };
        let seq = generate_sequence(23, &opts).unwrap();
        let solid = generate_sequence(23, &GenOptions { holes: 0, frames: 3, ..GenOptions::default() }).unwrap();
        assert!(seq.clothed[0].faces.len() < solid.clothed[0].faces.len());
        for c in &seq.clothed[1..] {
            assert_eq!(c.faces, seq.clothed[0].faces);
        }
    }

    #[test]
    fn sequence_disk_round_trip() {
        let seq = generate_sequence(29, &quick_options()).unwrap();
        let dir = std::env::temp_dir().join("local4d_seq_io");
        let _ = std::fs::remove_dir_all(&dir);
        write_sequence(&seq, &dir).unwrap();
        let back = read_sequence(&dir).unwrap();
        assert_eq!(back.frames(), seq.frames());
        assert_eq!(back.params, seq.params);
        for (a, b) in back.clothed.iter().zip(&seq.clothed) {
            assert_eq!(a.faces, b.faces);
            for (va, vb) in a.vertices.iter().zip(&b.vertices) {
                assert!(math::dist(*va, *vb) < 1e-12);
            }
        }
    }

    #[test]
    fn orbit_coverage_of_clothed_surface() {
        // every material surface point must be observed by some view within
        // 1 cm; correspondence across frames comes from the fixed topology
        let opts = GenOptions {
            frames: 17,
            ..GenOptions::default()
        };
        let seq = generate_sequence(31, &opts).unwrap();
        let (obs, _, _) = depth_observation(&seq, RigMode::Orbit, None);
        let trees: Vec<crate::geometry::KdTree> = obs
            .frames
            .iter()
            .map(|f| crate::geometry::KdTree::build(&f.points))
            .collect();
        let samples =
            crate::geometry::sample_surface_with_provenance(&seq.clothed[0], 3000, 7).unwrap();
        let mut covered = 0usize;
        for s in &samples {
            let hit = (0..seq.frames()).any(|g| {
                let pos_g = seq.clothed[g].bary_point(s.face, s.bary);
                trees[g].nearest(pos_g).dist < 0.01
            });
            if hit {
                covered += 1;
            }
        }
        let frac = covered as f64 / samples.len() as f64;
        assert!(frac >= 0.95, "material coverage {frac}");
    }
}
