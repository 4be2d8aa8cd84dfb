use local4d::metrics::eval_meshes;
use local4d::optimize::*;
use local4d::synth::*;
use std::time::Instant;

#[test]
fn probe_calibration() {
    let mut config = RunConfig::desk();
    config.seed = 42;
    let opts = GenOptions::default();
    let t0 = Instant::now();
    let seq = generate_sequence(42, &opts).unwrap();
    println!("gen: {:.1?}s frames {} verts {} area {:.4}", t0.elapsed(), seq.frames(), seq.clothed[0].vertices.len(), seq.clothed[0].total_area());

    let corpus = vec![TrainSequence { name: "a".into(), clothed: seq.clothed.clone(), body: seq.body.clone() }];
    let t0 = Instant::now();
    let mut ck = init_training(&corpus, &config).unwrap();
    println!("init: {:.1?} K={}", t0.elapsed(), ck.sequences[0].parts.k());

    let t0 = Instant::now();
    train_steps(&mut ck, &corpus, 50, None).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / 50.0;
    println!("50 steps: {:.2}s/step", per_step);

    // loss trajectory
    let dir = std::env::temp_dir().join("cal");
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("loss.csv");
    let mut logger = local4d::objectives::LossLogger::create(&csv).unwrap();
    let t0 = Instant::now();
    train_steps(&mut ck, &corpus, 450, Some(&mut logger)).unwrap();
    logger.finish().unwrap();
    println!("450 more steps in {:.1?}", t0.elapsed());
    let text = std::fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1).step_by(50) { println!("  {line}"); }
    let last = text.lines().last().unwrap();
    println!("  last: {last}");

    // fit the same sequence (auto-decode)
    let obs = sample_observation(&seq, 2000.0, 3).unwrap();
    let input = FitInput { observation: &obs, template: &seq.template, body_params: &seq.params };
    let t0 = Instant::now();
    let fit = fit_sequence(&ck, &input, &config, 300).unwrap();
    println!("fit 300 iters: {:.1?}; curve {:?}", t0.elapsed(), fit.loss_curve.iter().step_by(2).collect::<Vec<_>>());

    // extract frame 0 and 8, evaluate
    let model = local4d::fields::FieldModel::from_weights(ck.specs.clone(), ck.weights.clone());
    let cfg = local4d::extract::ExtractConfig {
        resolution: 56, n_parts: config.n_extract, padding: config.padding, seed: 1,
        postprocess: Some(config.postprocess), colorize: false,
    };
    for f in [0usize, 8] {
        let t0 = Instant::now();
        let mesh = local4d::extract::extract_frame(&model, &fit.stored.parts, seq.times[f], &seq.body[f], Some(&obs.frames[f]), &cfg).unwrap();
        let m = eval_meshes(&mesh, &seq.clothed[f], 20_000, 0.005, 9).unwrap();
        println!("frame {f}: extract {:.1?} verts {} chamfer {:.3}e-4 f {:.3} normal {:.3}", t0.elapsed(), mesh.vertices.len(), m.chamfer_l2*1e4, m.f_score, m.normal_consistency);
    }
}
