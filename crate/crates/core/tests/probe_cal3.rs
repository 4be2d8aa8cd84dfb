use local4d::metrics::eval_meshes;
use local4d::optimize::*;
use local4d::synth::*;
use std::time::Instant;

fn run(tag: &str, mut config: RunConfig, steps: u64, fit_iters: usize) {
    config.seed = 42;
    let opts = GenOptions::default();
    let seq = generate_sequence(42, &opts).unwrap();
    let corpus = vec![TrainSequence { name: "a".into(), clothed: seq.clothed.clone(), body: seq.body.clone() }];
    let mut ck = init_training(&corpus, &config).unwrap();
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("cal3");
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join(format!("{tag}.csv"));
    let mut logger = local4d::objectives::LossLogger::create(&csv).unwrap();
    train_steps(&mut ck, &corpus, steps, Some(&mut logger)).unwrap();
    logger.finish().unwrap();
    let train_t = t0.elapsed().as_secs_f64();
    let text = std::fs::read_to_string(&csv).unwrap();
    let ls_at = |s: usize| -> f64 {
        text.lines().skip(1).find(|l| l.starts_with(&format!("{s},")))
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).unwrap_or(f64::NAN)
    };
    let all_ls: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let tail = &all_ls[all_ls.len().saturating_sub(25)..];
    let ls_tail = tail.iter().sum::<f64>() / tail.len() as f64;
    let obs = sample_observation(&seq, 2000.0, 3).unwrap();
    let input = FitInput { observation: &obs, template: &seq.template, body_params: &seq.params };
    let t0 = Instant::now();
    let fit = fit_sequence(&ck, &input, &config, fit_iters).unwrap();
    let fit_t = t0.elapsed().as_secs_f64();
    let model = local4d::fields::FieldModel::from_weights(ck.specs.clone(), ck.weights.clone());
    let cfg = local4d::extract::ExtractConfig {
        resolution: 56, n_parts: config.n_extract, padding: config.padding, seed: 1,
        postprocess: Some(config.postprocess), colorize: false,
    };
    let mut chs = vec![]; let mut fs = vec![]; let mut ns = vec![];
    for f in [0usize, 8, 16] {
        let mesh = local4d::extract::extract_frame(&model, &fit.stored.parts, seq.times[f], &seq.body[f], Some(&obs.frames[f]), &cfg).unwrap();
        let m = eval_meshes(&mesh, &seq.clothed[f], 20_000, 0.005, 9).unwrap();
        chs.push(m.chamfer_l2*1e4); fs.push(m.f_score); ns.push(m.normal_consistency);
    }
    println!("{tag}: ls50 {:.3} ls_tail {:.3} K {} | ch {:?} F {:?} | train {:.0}s fit {:.0}s",
        ls_at(50), ls_tail, ck.sequences[0].parts.k(),
        chs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
        fs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(), train_t, fit_t);
}

#[test]
fn probe_variants3() {
    let mut c = RunConfig::desk(); c.learning_rate = 3e-3;
    run("lr3_1200_800", c, 1200, 800);
    let mut c = RunConfig::desk(); c.learning_rate = 3e-3; c.samples_per_frame = 256; c.frames_per_step = 3;
    run("lr3_m256f3_1200_800", c, 1200, 800);
}
