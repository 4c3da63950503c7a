use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nalgebra::Vector2;

use planesweep::camera::warp_pixel;
use planesweep::pipeline::{stage_probability, StageViews, View};
use planesweep::refine::{gaussian_logits, StageProblem};
use planesweep::sampling::uniform_hypotheses;
use planesweep::splat::SynthesisPlan;
use planesweep::{generate_synthetic_scene, run_cascade, CascadeConfig, LossWeights, SceneConfig, SplatConfig, StageConfig};

fn views() -> (Vec<View>, planesweep::scene::Scene) {
    let scene = generate_synthetic_scene(&SceneConfig::default()).unwrap();
    let views = scene
        .views
        .iter()
        .map(|v| View {
            image: v.image.clone(),
            camera: v.camera.clone(),
        })
        .collect();
    (views, scene)
}

fn bench_engine(c: &mut Criterion) {
    let (views, scene) = views();
    let sv = StageViews::new(&views, 1).unwrap();
    let (_, ref_cam) = sv.reference();
    let m = 8;
    let hyps = uniform_hypotheses(ref_cam.depth_min, ref_cam.depth_max, m, ref_cam.width, ref_cam.height).unwrap();

    c.bench_function("warp_pixel", |b| {
        b.iter(|| warp_pixel(&sv.cameras[0], &sv.cameras[1], black_box(Vector2::new(40.0, 30.0)), black_box(5.0)))
    });

    let stage = StageConfig::default_for(3);
    c.bench_function("stage_probability_full_res_m8", |b| {
        b.iter(|| stage_probability(&sv, &hyps, &stage, 3).unwrap())
    });

    let plan = SynthesisPlan::new(&hyps, ref_cam, &sv.cameras[1]).unwrap();
    let prob = stage_probability(&sv, &hyps, &stage, 3).unwrap();
    let splat = SplatConfig::default();
    c.bench_function("synthesize_source_depth_full_res_m8", |b| {
        b.iter(|| plan.synthesize(&prob, &splat).unwrap())
    });

    let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), splat, false).unwrap();
    let logits = gaussian_logits(&hyps, &scene.views[0].depth, 0.05);
    c.bench_function("stage_objective_and_gradient_m8", |b| {
        b.iter(|| {
            let p = problem.volume(&logits);
            let fwd = problem.forward(&p).unwrap();
            problem.gradient(&p, &fwd).unwrap()
        })
    });

    let mut group = c.benchmark_group("cascade");
    group.sample_size(10);
    let cfg = CascadeConfig::default();
    group.bench_function("default_three_stage", |b| b.iter(|| run_cascade(&views, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_engine);
criterion_main!(benches);
