//! Subcommand implementations. Artifact layouts:
//!
//! sequence dir (gen):   clothed_%03d.obj, body_%03d.obj, params.json,
//!                       template.l4db, meta.json [, cloud_%03d.ply, obs.json]
//! fit dir (fit/fuse):   fit.l4d, params.json, template.l4db, fit.json,
//!                       cloud_%03d.ply, obs.json [, depth_%03d.png,
//!                       camera_%03d.json]
//! mesh dir (extract):   mesh_%03d.obj
//! refine dir (refine):  everything a fit dir has plus refine_stats.json

use crate::progress::Progress;
use anyhow::{anyhow, bail, Context as _};
use clap::Subcommand;
use local4d::body::{perturb_params, read_params, read_template, write_params};
use local4d::fields::FieldModel;
use local4d::geometry::{read_obj, read_ply, write_obj, write_ply};
use local4d::metrics::MetricReport;
use local4d::objectives::{LossLogger, ObservationKind};
use local4d::optimize::{
    fit_sequence, fit_sequence_global, fit_to_checkpoint, init_training, init_training_global,
    read_checkpoint, refine_body, train_steps, write_checkpoint, Checkpoint, FitInput, FitResult,
    RunConfig, StoredSequence, TrainSequence,
};
use local4d::synth::{
    depth_observation, generate_sequence, read_sequence, sample_observation, write_sequence,
    ColorStyle, GenOptions, MotionPreset, RigMode, SequenceObservation,
};
use std::path::{Path, PathBuf};

pub struct Context {
    pub seed: Option<u64>,
    pub json: bool,
    pub dry_run: bool,
    pub config_path: Option<PathBuf>,
}

impl Context {
    /// Base config < config file < --seed flag.
    fn resolve_config(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut config = base;
        if let Some(path) = &self.config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            config = serde_json::from_str(&text).context("parsing run config")?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic clothed sequence with its ground-truth body.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sway")]
        preset: String,
        #[arg(long, default_value = "desk")]
        body: String,
        #[arg(long, default_value_t = 17)]
        frames: usize,
        /// Vertex colors: none | lr (left/right) | tb (top/bottom).
        #[arg(long, default_value = "none")]
        colors: String,
        /// Random patches removed from the clothed mesh.
        #[arg(long, default_value_t = 0)]
        holes: usize,
        /// Cloth offset in meters.
        #[arg(long, default_value_t = 0.012)]
        offset: f64,
        /// Wrinkle displacement bound in meters.
        #[arg(long, default_value_t = 0.006)]
        wrinkle_amp: f64,
        /// Also write sampled observation clouds at this density (pts/m^2).
        #[arg(long)]
        cloud_density: Option<f64>,
    },
    /// Train the shared networks and per-sequence codes on a corpus.
    Train {
        /// Sequence directories (repeatable).
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Passes over the corpus (one step per sequence per pass).
        #[arg(long)]
        epochs: Option<usize>,
        /// Exact optimizer step count (overrides --epochs).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Use the reduced desk-scale settings.
        #[arg(long)]
        desk: bool,
        /// Use the full-scale reference settings.
        #[arg(long)]
        paper_defaults: bool,
        /// Single-global-part baseline instead of local parts.
        #[arg(long)]
        global_baseline: bool,
        /// Append per-step losses to this CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Auto-decode latent codes against an observation of a sequence.
    Fit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fit | interpolate | extrapolate
        #[arg(long, default_value = "fit")]
        mode: String,
        /// Explicit observed frames, e.g. "0-8" or "0,4,8".
        #[arg(long)]
        frames: Option<String>,
        /// Number of random frames for interpolate mode.
        #[arg(long, default_value_t = 9)]
        random_frames: usize,
        /// Observation density in points per square meter.
        #[arg(long, default_value_t = 2000.0)]
        density: f64,
        /// Use existing clouds from this directory instead of sampling.
        #[arg(long)]
        cloud_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Fit with the single-global-part layout.
        #[arg(long)]
        global: bool,
        /// Perturb the ground-truth body parameters by this noise level.
        #[arg(long)]
        perturb_sigma: Option<f64>,
        #[arg(long, default_value_t = 1)]
        perturb_seed: u64,
        /// Observation seed.
        #[arg(long, default_value_t = 3)]
        obs_seed: u64,
    },
    /// Render depth views of a sequence, back-project, and fit the partial
    /// observations.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// static | orbit
        #[arg(long, default_value = "orbit")]
        camera: String,
        #[arg(long)]
        focal: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Inner-body refining against a fitted field (alternating rounds).
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        /// Fit directory produced with the (possibly perturbed) initial body.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract mesh sequences from a fit.
    Extract {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        /// Times to extract: "all" or frame list like "0-16".
        #[arg(long, default_value = "all")]
        frames: String,
        #[arg(long)]
        colorize: bool,
        /// Color vertices by canonical-frame position instead of texture.
        #[arg(long)]
        correspondence_colors: bool,
        #[arg(long)]
        no_postprocess: bool,
        /// Parts averaged per query point during extraction.
        #[arg(long)]
        n_extract: Option<usize>,
    },
    /// Evaluate predicted meshes against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpolate latent codes and body poses between two fits.
    InterpLatent {
        #[arg(long)]
        fit_a: PathBuf,
        #[arg(long)]
        fit_b: PathBuf,
        /// Interpolation coefficients, e.g. "0,0.25,0.5,0.75,1".
        #[arg(long, default_value = "0,0.5,1")]
        alphas: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Summarize loss curves / metric reports as CSV and an SVG plot.
    Report {
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn dispatch(cmd: Command, ctx: &Context) -> anyhow::Result<()> {
    match cmd {
        Command::Gen {
            out,
            preset,
            body,
            frames,
            colors,
            holes,
            offset,
            wrinkle_amp,
            cloud_density,
        } => cmd_gen(ctx, out, preset, body, frames, colors, holes, offset, wrinkle_amp, cloud_density),
        Command::Train {
            corpus,
            out,
            epochs,
            steps,
            resume,
            desk,
            paper_defaults,
            global_baseline,
            loss_csv,
        } => cmd_train(ctx, corpus, out, epochs, steps, resume, desk, paper_defaults, global_baseline, loss_csv),
        Command::Fit {
            ckpt,
            seq,
            out,
            mode,
            frames,
            random_frames,
            density,
            cloud_dir,
            iterations,
            global,
            perturb_sigma,
            perturb_seed,
            obs_seed,
        } => cmd_fit(
            ctx, ckpt, seq, out, mode, frames, random_frames, density, cloud_dir, iterations,
            global, perturb_sigma, perturb_seed, obs_seed,
        ),
        Command::Fuse {
            ckpt,
            seq,
            out,
            camera,
            focal,
            iterations,
        } => cmd_fuse(ctx, ckpt, seq, out, camera, focal, iterations),
        Command::Refine { ckpt, fit, out } => cmd_refine(ctx, ckpt, fit, out),
        Command::Extract {
            fit,
            out,
            resolution,
            frames,
            colorize,
            correspondence_colors,
            no_postprocess,
            n_extract,
        } => cmd_extract(ctx, fit, out, resolution, frames, colorize, correspondence_colors, no_postprocess, n_extract),
        Command::Eval {
            pred,
            gt,
            samples,
            tau,
            out,
        } => cmd_eval(ctx, pred, gt, samples, tau, out),
        Command::InterpLatent {
            fit_a,
            fit_b,
            alphas,
            out,
            resolution,
        } => cmd_interp(ctx, fit_a, fit_b, alphas, out, resolution),
        Command::Report {
            loss_csv,
            metrics,
            out,
        } => cmd_report(ctx, loss_csv, metrics, out),
    }
}

/// Parses "all" | "3" | "0-8" | "0,2,5".
fn parse_frames(spec: &str, total: usize) -> anyhow::Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..total).collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().context("frame range start")?;
            let b: usize = b.trim().parse().context("frame range end")?;
            if a > b {
                bail!("inverted frame range {part}");
            }
            out.extend(a..=b);
        } else {
            out.push(part.trim().parse().context("frame index")?);
        }
    }
    for &f in &out {
        if f >= total {
            bail!("frame {f} out of range (sequence has {total})");
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    ctx: &Context,
    out: PathBuf,
    preset: String,
    body: String,
    frames: usize,
    colors: String,
    holes: usize,
    offset: f64,
    wrinkle_amp: f64,
    cloud_density: Option<f64>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let motion = MotionPreset::parse(&preset).ok_or_else(|| anyhow!("unknown preset {preset}"))?;
    let body_preset =
        local4d::body::BodyPreset::parse(&body).ok_or_else(|| anyhow!("unknown body preset {body}"))?;
    let color_style = match colors.as_str() {
        "none" => None,
        "lr" => Some(ColorStyle::TwoToneLeftRight),
        "tb" => Some(ColorStyle::TwoToneTopBottom),
        other => bail!("unknown color style {other}"),
    };
    let seed = ctx.seed.unwrap_or(0);
    let options = GenOptions {
        body_preset,
        motion,
        frames,
        offset,
        wrinkle_amp,
        colors: color_style,
        holes,
    };
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "gen", "out": out.display().to_string(), "seed": seed, "options": options}));
        return Ok(());
    }
    let seq = generate_sequence(seed, &options)?;
    write_sequence(&seq, &out)?;
    if let Some(density) = cloud_density {
        let obs = sample_observation(&seq, density, seed ^ 0x6f62)?;
        write_observation(&obs, &out, None)?;
    }
    progress.event(
        "done",
        serde_json::json!({"frames": seq.frames(), "vertices": seq.clothed[0].vertices.len(), "out": out.display().to_string()}),
    );
    Ok(())
}

fn write_observation(
    obs: &SequenceObservation,
    dir: &Path,
    observed: Option<&[usize]>,
) -> anyhow::Result<()> {
    for (i, cloud) in obs.frames.iter().enumerate() {
        write_ply(cloud, &dir.join(format!("cloud_{i:03}.ply")))?;
    }
    let meta = serde_json::json!({
        "kind": match obs.kind { ObservationKind::Complete => "complete", ObservationKind::Partial => "partial" },
        "times": obs.times,
        "frames": obs.frames.len(),
        "observed": observed,
    });
    std::fs::write(dir.join("obs.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_observation(dir: &Path) -> anyhow::Result<SequenceObservation> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("obs.json"))?)?;
    let times: Vec<f64> = serde_json::from_value(meta["times"].clone())?;
    let kind = match meta["kind"].as_str() {
        Some("partial") => ObservationKind::Partial,
        _ => ObservationKind::Complete,
    };
    let mut frames = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        let cloud = read_ply(&dir.join(format!("cloud_{i:03}.ply")))?.with_time(t);
        frames.push(cloud);
    }
    Ok(SequenceObservation { frames, times, kind })
}

fn load_corpus(dirs: &[PathBuf]) -> anyhow::Result<Vec<TrainSequence>> {
    dirs.iter()
        .map(|dir| {
            let seq = read_sequence(dir)
                .with_context(|| format!("reading sequence {}", dir.display()))?;
            Ok(TrainSequence {
                name: dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "seq".into()),
                clothed: seq.clothed,
                body: seq.body,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Context,
    corpus_dirs: Vec<PathBuf>,
    out: PathBuf,
    epochs: Option<usize>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    desk: bool,
    paper_defaults: bool,
    global_baseline: bool,
    loss_csv: Option<PathBuf>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    if desk && paper_defaults {
        bail!("--desk and --paper-defaults are mutually exclusive");
    }
    let base = if desk { RunConfig::desk() } else { RunConfig::paper_defaults() };
    let mut config = ctx.resolve_config(base)?;
    if let Some(e) = epochs {
        config.train_epochs = e;
    }
    let corpus = load_corpus(&corpus_dirs)?;
    config.frames = corpus[0].body.len();
    let total_steps = steps.unwrap_or((config.train_epochs * corpus.len()) as u64);
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "train", "sequences": corpus.len(), "steps": total_steps, "config": config, "global_baseline": global_baseline}));
        return Ok(());
    }
    let mut ck = match &resume {
        Some(path) => read_checkpoint(path).map_err(|e| anyhow!("{e}"))?,
        None if global_baseline => init_training_global(&corpus, &config)?,
        None => init_training(&corpus, &config)?,
    };
    let remaining = total_steps.saturating_sub(if resume.is_some() { 0 } else { ck.step });
    let mut logger = match &loss_csv {
        Some(path) => Some(LossLogger::create(path)?),
        None => None,
    };
    progress.event("train_start", serde_json::json!({"from_step": ck.step, "steps": remaining, "parts": ck.sequences.iter().map(|s| s.parts.k()).collect::<Vec<_>>()}));
    train_steps(&mut ck, &corpus, remaining, logger.as_mut())?;
    if let Some(l) = logger {
        l.finish()?;
    }
    write_checkpoint(&ck, &out).map_err(|e| anyhow!("{e}"))?;
    progress.event("done", serde_json::json!({"step": ck.step, "out": out.display().to_string()}));
    Ok(())
}

/// Writes the full fit-directory layout.
fn write_fit_dir(
    out: &Path,
    ck: &Checkpoint,
    fit: &FitResult,
    iterations: usize,
    template_src: &Path,
    obs: &SequenceObservation,
    observed: Option<&[usize]>,
    mode: &str,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let fit_ck = fit_to_checkpoint(ck, fit, iterations);
    write_checkpoint(&fit_ck, &out.join("fit.l4d")).map_err(|e| anyhow!("{e}"))?;
    write_params(&fit.body_params, &out.join("params.json"))?;
    std::fs::copy(template_src, out.join("template.l4db"))?;
    write_observation(obs, out, observed)?;
    let meta = serde_json::json!({
        "mode": mode,
        "iterations": iterations,
        "parts": fit.stored.parts.k(),
        "loss_curve": fit.loss_curve,
    });
    std::fs::write(out.join("fit.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    ctx: &Context,
    ckpt: PathBuf,
    seq_dir: PathBuf,
    out: PathBuf,
    mode: String,
    frames_spec: Option<String>,
    random_frames: usize,
    density: f64,
    cloud_dir: Option<PathBuf>,
    iterations: Option<usize>,
    global: bool,
    perturb_sigma: Option<f64>,
    perturb_seed: u64,
    obs_seed: u64,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let ck = read_checkpoint(&ckpt).map_err(|e| anyhow!("{e}"))?;
    let mut config = ctx.resolve_config(ck.config.clone())?;
    let iterations = iterations.unwrap_or(config.fit_iterations);
    let seq = read_sequence(&seq_dir)?;
    let total = seq.frames();
    let observed: Vec<usize> = match mode.as_str() {
        "fit" => match &frames_spec {
            Some(s) => parse_frames(s, total)?,
            None => (0..total).collect(),
        },
        "interpolate" => {
            let mut rng = local4d::util::DetRng::from_parts(&[config.seed, 0x696e74]);
            let mut ids = rng.partial_shuffle_indices(total, random_frames.min(total));
            ids.sort_unstable();
            ids
        }
        "extrapolate" => {
            let n = match &frames_spec {
                Some(s) => parse_frames(s, total)?.len(),
                None => 9,
            };
            (0..n.min(total)).collect()
        }
        other => bail!("unknown fit mode {other}"),
    };
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "fit", "mode": mode, "observed": observed, "iterations": iterations, "density": density, "global": global, "perturb_sigma": perturb_sigma}));
        return Ok(());
    }
    let full_obs = match &cloud_dir {
        Some(dir) => read_observation(dir)?,
        None => sample_observation(&seq, density, obs_seed)?,
    };
    let obs = full_obs.subset(&observed);
    let mut body_params = seq.params.clone();
    if let Some(sigma) = perturb_sigma {
        body_params = perturb_params(&body_params, sigma, perturb_seed);
    }
    // fitting needs body parameters for every tracked frame; supervision is
    // restricted to the observed subset
    let input = FitInput {
        observation: &obs,
        template: &seq.template,
        body_params: &body_params,
    };
    config.frames = total;
    let fit = if global {
        fit_sequence_global(&ck, &input, &config, iterations)?
    } else {
        fit_sequence(&ck, &input, &config, iterations)?
    };
    progress.event("fit_done", serde_json::json!({"parts": fit.stored.parts.k(), "final_loss": fit.loss_curve.last().map(|c| c.1)}));
    write_fit_dir(
        &out,
        &ck,
        &fit,
        iterations,
        &seq_dir.join("template.l4db"),
        &full_obs,
        Some(&observed),
        &mode,
    )?;
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}

fn cmd_fuse(
    ctx: &Context,
    ckpt: PathBuf,
    seq_dir: PathBuf,
    out: PathBuf,
    camera: String,
    focal: Option<f64>,
    iterations: Option<usize>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let mode = RigMode::parse(&camera).ok_or_else(|| anyhow!("unknown camera mode {camera}"))?;
    let ck = read_checkpoint(&ckpt).map_err(|e| anyhow!("{e}"))?;
    let mut config = ctx.resolve_config(ck.config.clone())?;
    let iterations = iterations.unwrap_or(config.fit_iterations);
    let seq = read_sequence(&seq_dir)?;
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "fuse", "camera": camera, "iterations": iterations}));
        return Ok(());
    }
    let (obs, depths, cameras) = depth_observation(&seq, mode, focal);
    std::fs::create_dir_all(&out)?;
    for (i, (d, c)) in depths.iter().zip(&cameras).enumerate() {
        d.write_png(&out.join(format!("depth_{i:03}.png")))?;
        c.write_json(&out.join(format!("camera_{i:03}.json")))?;
    }
    progress.event(
        "rendered",
        serde_json::json!({"views": depths.len(), "points": obs.frames.iter().map(|f| f.len()).sum::<usize>()}),
    );
    config.frames = seq.frames();
    let input = FitInput {
        observation: &obs,
        template: &seq.template,
        body_params: &seq.params,
    };
    let fit = fit_sequence(&ck, &input, &config, iterations)?;
    let observed: Vec<usize> = (0..seq.frames()).collect();
    write_fit_dir(
        &out,
        &ck,
        &fit,
        iterations,
        &seq_dir.join("template.l4db"),
        &obs,
        Some(&observed),
        "fuse",
    )?;
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}

fn cmd_refine(ctx: &Context, ckpt: PathBuf, fit_dir: PathBuf, out: PathBuf) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let ck = read_checkpoint(&ckpt).map_err(|e| anyhow!("{e}"))?;
    let config = ctx.resolve_config(ck.config.clone())?;
    let fit_ck = read_checkpoint(&fit_dir.join("fit.l4d")).map_err(|e| anyhow!("{e}"))?;
    let template = read_template(&fit_dir.join("template.l4db"))?;
    let initial = read_params(&fit_dir.join("params.json"))?;
    let obs = read_observation(&fit_dir)?;
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "refine", "rounds": config.refine_rounds, "iterations": config.refine_iterations}));
        return Ok(());
    }
    let stored: StoredSequence = fit_ck
        .sequences
        .first()
        .cloned()
        .ok_or_else(|| anyhow!("fit checkpoint holds no sequence"))?;
    let mut fit = FitResult {
        stored,
        body_params: initial.clone(),
        loss_curve: Vec::new(),
    };
    let (refined, stats) = refine_body(&ck, &template, &initial, &obs, &mut fit, &config)?;
    progress.event(
        "refined",
        serde_json::json!({"body_loss_before": stats.body_loss_before, "body_loss_after": stats.body_loss_after}),
    );
    fit.body_params = refined;
    let observed: Vec<usize> = (0..obs.frames.len()).collect();
    write_fit_dir(
        &out,
        &ck,
        &fit,
        config.refine_refit_iterations,
        &fit_dir.join("template.l4db"),
        &obs,
        Some(&observed),
        "refine",
    )?;
    std::fs::write(out.join("refine_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_extract(
    ctx: &Context,
    fit_dir: PathBuf,
    out: PathBuf,
    resolution: Option<usize>,
    frames_spec: String,
    colorize: bool,
    correspondence_colors: bool,
    no_postprocess: bool,
    n_extract: Option<usize>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let fit_ck = read_checkpoint(&fit_dir.join("fit.l4d")).map_err(|e| anyhow!("{e}"))?;
    let config = ctx.resolve_config(fit_ck.config.clone())?;
    let template = read_template(&fit_dir.join("template.l4db"))?;
    let params = read_params(&fit_dir.join("params.json"))?;
    let obs = read_observation(&fit_dir).ok();
    let stored = fit_ck
        .sequences
        .first()
        .ok_or_else(|| anyhow!("fit checkpoint holds no sequence"))?;
    let total = params.num_frames();
    let frames = parse_frames(&frames_spec, total)?;
    let cfg = local4d::extract::ExtractConfig {
        resolution: resolution.unwrap_or(config.extract_resolution),
        n_parts: n_extract.unwrap_or(config.n_extract),
        padding: config.padding,
        seed: config.seed,
        postprocess: if no_postprocess || obs.is_none() {
            None
        } else {
            Some(config.postprocess)
        },
        colorize,
    };
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "extract", "frames": frames, "config": cfg}));
        return Ok(());
    }
    let model = FieldModel::from_weights(fit_ck.specs.clone(), fit_ck.weights.clone());
    std::fs::create_dir_all(&out)?;
    let times: Vec<f64> = stored.parts.times.clone();
    for &f in &frames {
        let t = times[f];
        let body = local4d::optimize::pose_at_time(&template, &params, t)?;
        let cloud = obs.as_ref().map(|o| &o.frames[f]);
        let mut mesh = local4d::extract::extract_frame(&model, &stored.parts, t, &body, cloud, &cfg)
            .map_err(|e| anyhow!("frame {f}: {e}"))?;
        if correspondence_colors {
            let pat = stored.parts.at_time(t);
            let bbox = body.aabb().padded(config.padding);
            mesh = local4d::extract::colorize_correspondence(&model, &stored.parts, &pat, &mesh, &bbox);
        }
        write_obj(&mesh, &out.join(format!("mesh_{f:03}.obj")))?;
        progress.event("frame", serde_json::json!({"frame": f, "vertices": mesh.vertices.len(), "faces": mesh.faces.len()}));
    }
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}

/// Meshes to evaluate in a directory: extraction output (mesh_*) or the
/// clothed ground truth (clothed_*) take precedence over arbitrary .obj files.
fn obj_files_in(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "obj").unwrap_or(false))
        .collect();
    files.sort();
    for prefix in ["mesh_", "clothed_"] {
        let matched: Vec<PathBuf> = files
            .iter()
            .filter(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().starts_with(prefix))
                    .unwrap_or(false)
            })
            .cloned()
            .collect();
        if !matched.is_empty() {
            return Ok(matched);
        }
    }
    Ok(files)
}

fn cmd_eval(
    ctx: &Context,
    pred: PathBuf,
    gt: PathBuf,
    samples: Option<usize>,
    tau: Option<f64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let pred_files = obj_files_in(&pred)?;
    let gt_files = obj_files_in(&gt)?;
    if pred_files.is_empty() || pred_files.len() != gt_files.len() {
        bail!(
            "prediction/ground-truth mesh counts differ ({} vs {})",
            pred_files.len(),
            gt_files.len()
        );
    }
    let config = ctx.resolve_config(RunConfig::paper_defaults())?;
    let samples = samples.unwrap_or(config.metric_samples);
    let tau = tau.unwrap_or(config.tau);
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "eval", "frames": pred_files.len(), "samples": samples, "tau": tau}));
        return Ok(());
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (p, g) in pred_files.iter().zip(&gt_files) {
        preds.push(read_obj(p)?);
        gts.push(read_obj(g)?);
    }
    let report = local4d::metrics::eval_sequences(&preds, &gts, samples, tau, config.seed)
        .map_err(|e| anyhow!("{e}"))?;
    if ctx.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.table());
    }
    if let Some(path) = out {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_interp(
    ctx: &Context,
    fit_a: PathBuf,
    fit_b: PathBuf,
    alphas_spec: String,
    out: PathBuf,
    resolution: Option<usize>,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    let alphas: Vec<f64> = alphas_spec
        .split(',')
        .map(|a| a.trim().parse::<f64>().context("alpha value"))
        .collect::<Result<_, _>>()?;
    let ck_a = read_checkpoint(&fit_a.join("fit.l4d")).map_err(|e| anyhow!("{e}"))?;
    let ck_b = read_checkpoint(&fit_b.join("fit.l4d")).map_err(|e| anyhow!("{e}"))?;
    if ck_a.weights != ck_b.weights {
        bail!("fits come from different checkpoints (weights differ)");
    }
    let config = ctx.resolve_config(ck_a.config.clone())?;
    let template = read_template(&fit_a.join("template.l4db"))?;
    let a = FitResult {
        stored: ck_a.sequences[0].clone(),
        body_params: read_params(&fit_a.join("params.json"))?,
        loss_curve: vec![],
    };
    let b = FitResult {
        stored: ck_b.sequences[0].clone(),
        body_params: read_params(&fit_b.join("params.json"))?,
        loss_curve: vec![],
    };
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "interp-latent", "alphas": alphas}));
        return Ok(());
    }
    let model = FieldModel::from_weights(ck_a.specs.clone(), ck_a.weights.clone());
    let cfg = local4d::extract::ExtractConfig {
        resolution: resolution.unwrap_or(config.extract_resolution),
        n_parts: config.n_extract,
        padding: config.padding,
        seed: config.seed,
        postprocess: None,
        colorize: false,
    };
    for &alpha in &alphas {
        let (stored, params) = local4d::optimize::interp_latent(&a, &b, alpha).map_err(|e| anyhow!("{e}"))?;
        let dir = out.join(format!("alpha_{alpha:.3}"));
        std::fs::create_dir_all(&dir)?;
        for (f, &t) in stored.parts.times.clone().iter().enumerate() {
            let body = local4d::optimize::pose_at_time(&template, &params, t)?;
            let mesh = local4d::extract::extract_frame(&model, &stored.parts, t, &body, None, &cfg)
                .map_err(|e| anyhow!("alpha {alpha} frame {f}: {e}"))?;
            write_obj(&mesh, &dir.join(format!("mesh_{f:03}.obj")))?;
        }
        progress.event("alpha_done", serde_json::json!({"alpha": alpha}));
    }
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}

fn svg_polyline(points: &[(f64, f64)], w: f64, h: f64) -> String {
    if points.is_empty() {
        return String::new();
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let (xr, yr) = ((xmax - xmin).max(1e-12), (ymax - ymin).max(1e-12));
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            format!(
                "{:.2},{:.2}",
                10.0 + (x - xmin) / xr * (w - 20.0),
                h - 10.0 - (y - ymin) / yr * (h - 20.0)
            )
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"#2266cc\" stroke-width=\"1.5\" points=\"{}\"/>",
        coords.join(" ")
    )
}

fn cmd_report(
    ctx: &Context,
    loss_csv: Option<PathBuf>,
    metrics: Option<PathBuf>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let progress = Progress::new(ctx.json);
    if loss_csv.is_none() && metrics.is_none() {
        bail!("report needs --loss-csv and/or --metrics");
    }
    if ctx.dry_run {
        progress.event("plan", serde_json::json!({"command": "report"}));
        return Ok(());
    }
    std::fs::create_dir_all(&out)?;
    let (w, h) = (480.0, 240.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let mut summary = String::from("source,series,count,first,last,min\n");
    if let Some(path) = &loss_csv {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() >= 5 {
                let step: f64 = cols[0].parse().unwrap_or(0.0);
                let total: f64 = cols[4].parse().unwrap_or(f64::NAN);
                if total.is_finite() {
                    rows.push((step, total));
                }
            }
        }
        if !rows.is_empty() {
            svg.push_str(&svg_polyline(&rows, w, h));
            let min = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
            summary.push_str(&format!(
                "{},total_loss,{},{},{},{}\n",
                path.display(),
                rows.len(),
                rows[0].1,
                rows[rows.len() - 1].1,
                min
            ));
        }
    }
    if let Some(path) = &metrics {
        let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let rows: Vec<(f64, f64)> = report
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (i as f64, f.chamfer_l2 * 1e4))
            .collect();
        svg.push_str(&svg_polyline(&rows, w, h).replace("#2266cc", "#cc4422"));
        summary.push_str(&format!(
            "{},chamfer_x1e4,{},{},{},{}\n",
            path.display(),
            report.frames.len(),
            rows.first().map(|r| r.1).unwrap_or(0.0),
            rows.last().map(|r| r.1).unwrap_or(0.0),
            report.mean.chamfer_l2 * 1e4
        ));
        std::fs::write(out.join("metrics_table.txt"), report.table())?;
    }
    svg.push_str("</svg>\n");
    std::fs::write(out.join("plot.svg"), svg)?;
    std::fs::write(out.join("summary.csv"), summary)?;
    progress.event("done", serde_json::json!({"out": out.display().to_string()}));
    Ok(())
}
