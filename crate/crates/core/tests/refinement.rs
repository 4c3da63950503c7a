use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planesweep::gradcheck::{gradient_check, CheckStatus};
use planesweep::pipeline::{StageViews, View};
use planesweep::refine::{gaussian_logits, nearest_one_hot_logits, refine_depth_by_descent, StageProblem};
use planesweep::sampling::uniform_hypotheses;
use planesweep::{generate_synthetic_scene, DepthHypothesisGrid, DepthMap, LossWeights, RefineConfig, SceneConfig, SplatConfig};

fn small_scene() -> (StageViews, DepthHypothesisGrid, DepthMap) {
    let cfg = SceneConfig {
        width: 32,
        height: 24,
        focal: 25.0,
        ..SceneConfig::default()
    };
    let s = generate_synthetic_scene(&cfg).unwrap();
    let views: Vec<View> = s
        .views
        .iter()
        .map(|v| View {
            image: v.image.clone(),
            camera: v.camera.clone(),
        })
        .collect();
    let sv = StageViews::new(&views, 1).unwrap();
    let c = &sv.cameras[0];
    let hyps = uniform_hypotheses(c.depth_min, c.depth_max, 16, 32, 24).unwrap();
    (sv, hyps, s.views[0].depth.clone())
}

#[test]
fn one_hot_ground_truth_start_does_not_increase_loss() {
    let (sv, hyps, gt) = small_scene();
    let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), SplatConfig::default(), false).unwrap();
    let cfg = RefineConfig {
        steps: 50,
        ..RefineConfig::default()
    };
    for gap in [1e3, 6.0] {
        let init = problem.volume(&nearest_one_hot_logits(&hyps, &gt, gap));
        let out = refine_depth_by_descent(&problem, &init, &cfg).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]), "gap {gap}: {:?}", out.trace);
        assert!(out.trace.last().unwrap() <= &out.trace[0]);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (sv, hyps, gt) = small_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dc in [false, true] {
        let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), SplatConfig::default(), dc).unwrap();
        let x0 = gaussian_logits(&hyps, &gt, 0.6);
        let mut conclusive = 0;
        for _ in 0..200 {
            if conclusive == 20 {
                break;
            }
            let x: Vec<f64> = x0.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let dir: Vec<f64> = (0..problem.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = gradient_check(&problem, &x, &dir, 1e-5, 1e-4).unwrap();
            match r.status {
                CheckStatus::Inconclusive => {}
                CheckStatus::Pass => conclusive += 1,
                CheckStatus::Fail => panic!("depth consistency {dc}: {r:?}"),
            }
        }
        assert_eq!(conclusive, 20, "too few conclusive probes with depth consistency {dc}");
    }
}
