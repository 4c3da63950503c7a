//! Depth refinement by gradient descent on per-pixel logits.
//!
//! [`StageProblem`] evaluates the unsupervised objective of one stage as a
//! function of the logits and backpropagates it exactly through the softmax,
//! depth regression, source-depth synthesis, both rendering directions, and
//! the smoothed reference image that guides the smoothness term. Masks are
//! treated as constants.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camera::warp_pixel;
use crate::cost_volume::{regress_depth, regress_depth_vjp_prob, softmax_vjp, ProbabilityVolume, INVALID_LOGIT};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};
use crate::loss::{depth_smoothness_vjp, depth_smoothness_vjp_guide, photometric_loss_vjp, ssim_loss_vjp, LossWeights};
use crate::pipeline::{evaluate_stage, synthesis_plans, StageForward, StageViews, View};
use crate::sampling::{uniform_hypotheses, DepthHypothesisGrid};
use crate::splat::{forward_project_depth, smooth_reference_vjp, splat_vjp, RenderedView, SplatConfig, SynthesisPlan};

/// Hypotheses whose warp lands inside every source image.
pub fn hypothesis_validity(views: &StageViews, hyps: &DepthHypothesisGrid) -> Vec<bool> {
    let reference = &views.cameras[0];
    let (w, m) = (hyps.width, hyps.num_hypotheses);
    (0..hyps.depths.len())
        .into_par_iter()
        .map(|e| {
            let p = e / m;
            let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
            views.cameras[1..].iter().all(|src| {
                warp_pixel(reference, src, pixel, hyps.depths[e]).is_ok_and(|(q, _)| src.in_bounds(&q))
            })
        })
        .collect()
}

/// One stage's objective as a function of its logits.
#[derive(Debug, Clone)]
pub struct StageProblem<'a> {
    pub views: &'a StageViews,
    pub hyps: &'a DepthHypothesisGrid,
    pub plans: Vec<SynthesisPlan>,
    /// Per-hypothesis validity; invalid logits are pinned to the invalid value.
    pub valid: Vec<bool>,
    /// Reference pixels whose regressed depth enters the renderings and losses.
    pub reliable: Vec<bool>,
    pub weights: LossWeights,
    pub splat: SplatConfig,
    pub include_depth_consistency: bool,
}

impl<'a> StageProblem<'a> {
    pub fn new(
        views: &'a StageViews,
        hyps: &'a DepthHypothesisGrid,
        weights: LossWeights,
        splat: SplatConfig,
        include_depth_consistency: bool,
    ) -> Result<Self> {
        if views.images.len() < 2 {
            return Err(Error::domain("refinement needs a reference and at least one source view"));
        }
        weights.validate()?;
        splat.validate()?;
        let plans = synthesis_plans(views, hyps)?;
        let valid = hypothesis_validity(views, hyps);
        let m = hyps.num_hypotheses;
        let reliable = (0..hyps.pixel_count())
            .map(|p| valid[p * m..(p + 1) * m].iter().all(|&v| v))
            .collect();
        Ok(Self {
            views,
            hyps,
            plans,
            valid,
            reliable,
            weights,
            splat,
            include_depth_consistency,
        })
    }

    pub fn dim(&self) -> usize {
        self.hyps.depths.len()
    }

    /// Probability volume for `logits`, with invalid entries pinned.
    pub fn volume(&self, logits: &[f64]) -> ProbabilityVolume {
        let logits = logits
            .iter()
            .zip(&self.valid)
            .map(|(&l, &v)| if v { l } else { INVALID_LOGIT })
            .collect();
        let h = self.hyps;
        ProbabilityVolume::from_logits_masked(h.width, h.height, h.num_hypotheses, logits, self.valid.clone())
    }

    pub fn forward(&self, prob: &ProbabilityVolume) -> Result<StageForward> {
        evaluate_stage(self.views, self.hyps, prob, &self.plans, Some(&self.reliable), &self.splat)
    }

    /// Weighted objective of a forward pass.
    pub fn objective(&self, fwd: &StageForward) -> f64 {
        let (w, t) = (&self.weights, &fwd.terms);
        let dc = if self.include_depth_consistency { w.depth_consistency * t.dc } else { 0.0 };
        w.photometric * t.pc + w.ssim * t.ssim + w.smoothness * t.ds + dc
    }

    pub fn value(&self, logits: &[f64]) -> Result<f64> {
        Ok(self.objective(&self.forward(&self.volume(logits))?))
    }

    /// Gradient of [`Self::objective`] with respect to the logits.
    pub fn gradient(&self, prob: &ProbabilityVolume, fwd: &StageForward) -> Result<Vec<f64>> {
        let views = self.views;
        let (ref_img, ref_cam) = views.reference();
        let w = &self.weights;
        let n_ref = ref_img.pixel_count();
        let mut g_ref_depth = vec![0.0; n_ref];
        let mut g_prob = vec![0.0; prob.prob.len()];

        let image_grad = |rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]| -> Vec<f64> {
            let a = photometric_loss_vjp(rendered, real, mask);
            let b = ssim_loss_vjp(rendered, real, mask);
            a.iter().zip(&b).map(|(x, y)| w.photometric * x + w.ssim * y).collect()
        };
        let depth_grad_of_render = |rv: &RenderedView, payload: &ImageGrid, g_img: &[f64]| -> Vec<f64> {
            let g = splat_vjp(&rv.projection.geometry, None, &payload.data, payload.channels, &rv.field, g_img, &self.splat);
            rv.projection.chain_to_depth(&g.positions, None)
        };

        let num_sources = views.num_sources();
        let masks: Vec<Vec<bool>> = fwd.rendered_references.iter().map(|r| r.mask.clone()).collect();
        let mut g_guide = depth_smoothness_vjp_guide(&fwd.ref_depth, &fwd.smooth_reference);
        g_guide.iter_mut().for_each(|g| *g *= w.smoothness);
        let g_rendered_refs = smooth_reference_vjp(&masks, ref_img.channels, &g_guide);
        for i in 0..num_sources {
            let src_img = &views.images[i + 1];
            let rs = &fwd.rendered_sources[i];
            let g_img = image_grad(&rs.image, src_img, &rs.mask);
            add_into(&mut g_ref_depth, &depth_grad_of_render(rs, ref_img, &g_img));

            let rr = &fwd.rendered_references[i];
            let mut g_img = image_grad(&rr.image, ref_img, &rr.mask);
            add_into(&mut g_img, &g_rendered_refs[i]);
            let g_src_depth = depth_grad_of_render(rr, src_img, &g_img);
            let plan = &self.plans[i];
            add_into(&mut g_prob, &plan.vjp(&prob.prob, &fwd.synthetic_fields[i], &g_src_depth, &self.splat));
        }

        let g_ds = depth_smoothness_vjp(&fwd.ref_depth, &fwd.smooth_reference);
        g_ref_depth.iter_mut().zip(&g_ds).for_each(|(g, d)| *g += w.smoothness * d);

        if self.include_depth_consistency && w.depth_consistency > 0.0 {
            let scale = w.depth_consistency / num_sources as f64;
            for i in 0..num_sources {
                let src_cam = &views.cameras[i + 1];
                let (projected, proj, field) = forward_project_depth(&fwd.ref_depth, ref_cam, src_cam, &self.splat)?;
                let ds = &fwd.synthetic_depths[i];
                let both: Vec<usize> = (0..ds.depth.len()).filter(|&q| projected.mask[q] && ds.mask[q]).collect();
                if both.is_empty() {
                    continue;
                }
                let k = scale / both.len() as f64;
                let mut g_proj = vec![0.0; ds.depth.len()];
                let mut g_syn = vec![0.0; ds.depth.len()];
                for &q in &both {
                    let s = sign(projected.depth[q] - ds.depth[q]);
                    g_proj[q] = k * s;
                    g_syn[q] = -k * s;
                }
                let g = splat_vjp(&proj.geometry, None, &proj.geometry.depths, 1, &field, &g_proj, &self.splat);
                add_into(&mut g_ref_depth, &proj.chain_to_depth(&g.positions, Some(&g.payload)));
                add_into(&mut g_prob, &self.plans[i].vjp(&prob.prob, &fwd.synthetic_fields[i], &g_syn, &self.splat));
            }
        }

        for (g, &m) in g_ref_depth.iter_mut().zip(&fwd.ref_depth.mask) {
            if !m {
                *g = 0.0;
            }
        }
        add_into(&mut g_prob, &regress_depth_vjp_prob(prob, self.hyps, &g_ref_depth));
        Ok(softmax_vjp(prob, &g_prob))
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    /// Initial trial step of the line search.
    pub step_size: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Trial-step growth after an accepted step.
    pub grow: f64,
    pub include_depth_consistency: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 1e3,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
            grow: 2.0,
            include_depth_consistency: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::domain("step size must be positive"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.armijo >= 0.0 && self.armijo < 1.0) || !(self.grow >= 1.0) {
            return Err(Error::domain("line search needs 0 < shrink < 1, 0 <= armijo < 1, grow >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    /// Regressed depth of the final logits.
    pub depth: DepthMap,
    pub probability: ProbabilityVolume,
    /// Objective before the first step and after every accepted step.
    pub trace: Vec<f64>,
    /// Set when the line search ran out of backtracks before `steps` steps.
    pub halted: bool,
}

/// Backtracking gradient descent on the logits of `initial`.
pub fn refine_depth_by_descent(problem: &StageProblem<'_>, initial: &ProbabilityVolume, cfg: &RefineConfig) -> Result<RefineOutput> {
    cfg.validate()?;
    if initial.logits.len() != problem.dim() {
        return Err(Error::shape(format!(
            "initial logits have {} entries, the problem has {}",
            initial.logits.len(),
            problem.dim()
        )));
    }
    if cfg.steps == 0 {
        return Ok(RefineOutput {
            depth: regress_depth(initial, problem.hyps)?,
            probability: initial.clone(),
            trace: vec![problem.value(&initial.logits)?],
            halted: false,
        });
    }
    let mut prob = problem.volume(&initial.logits);
    let mut fwd = problem.forward(&prob)?;
    let mut f = problem.objective(&fwd);
    let mut trace = vec![f];
    let mut alpha = cfg.step_size;
    let mut halted = false;
    for _ in 0..cfg.steps {
        let g = problem.gradient(&prob, &fwd)?;
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = prob.logits.iter().zip(&g).map(|(l, d)| l - alpha * d).collect();
            let tp = problem.volume(&trial);
            let tf = problem.forward(&tp)?;
            let v = problem.objective(&tf);
            if v <= f - cfg.armijo * alpha * g2 {
                accepted = Some((tp, tf, v));
                break;
            }
            alpha *= cfg.shrink;
        }
        match accepted {
            Some((tp, tf, v)) => {
                prob = tp;
                fwd = tf;
                f = v;
                trace.push(f);
                alpha *= cfg.grow;
            }
            None => {
                halted = true;
                break;
            }
        }
    }
    Ok(RefineOutput {
        depth: regress_depth(&prob, problem.hyps)?,
        probability: prob,
        trace,
        halted,
    })
}

/// Logits of a Gaussian bump of width `sigma` around `target` depth per pixel;
/// pixels without a target get flat logits.
pub fn gaussian_logits(hyps: &DepthHypothesisGrid, target: &DepthMap, sigma: f64) -> Vec<f64> {
    let m = hyps.num_hypotheses;
    let mut logits = vec![0.0; hyps.depths.len()];
    for p in 0..hyps.pixel_count() {
        if let Some(t) = target.mask[p].then(|| target.depth[p]) {
            for (l, &d) in logits[p * m..(p + 1) * m].iter_mut().zip(hyps.pixel_depths(p)) {
                let z = (d - t) / sigma;
                *l = -0.5 * z * z;
            }
        }
    }
    logits
}

/// Logits putting almost all mass (`gap` nats above the rest) on the
/// hypothesis nearest to `target`.
pub fn nearest_one_hot_logits(hyps: &DepthHypothesisGrid, target: &DepthMap, gap: f64) -> Vec<f64> {
    let m = hyps.num_hypotheses;
    let mut logits = vec![0.0; hyps.depths.len()];
    for p in 0..hyps.pixel_count() {
        if let Some(t) = target.mask[p].then(|| target.depth[p]) {
            let d = hyps.pixel_depths(p);
            let best = (0..m)
                .min_by(|&a, &b| (d[a] - t).abs().total_cmp(&(d[b] - t).abs()))
                .unwrap_or(0);
            logits[p * m + best] = gap;
        }
    }
    logits
}

/// Setup of the descent demo: a uniform grid at one stage resolution and a
/// Gaussian start around a scaled ground-truth depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSetup {
    pub divisor: usize,
    pub num_hypotheses: usize,
    /// Relative depth offset of the starting point.
    pub perturbation: f64,
    /// Width of the starting bump, in hypothesis spacings.
    pub sigma_bins: f64,
    pub descent: RefineConfig,
}

impl Default for RefineSetup {
    fn default() -> Self {
        Self {
            divisor: 2,
            num_hypotheses: 32,
            perturbation: 0.1,
            sigma_bins: 2.0,
            descent: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineDemo {
    pub views: StageViews,
    pub hypotheses: DepthHypothesisGrid,
    pub ground_truth: DepthMap,
    pub initial_depth: DepthMap,
    pub output: RefineOutput,
    pub mae_before: f64,
    pub mae_after: f64,
}

/// Refines the reference depth of `views` from `(1 + perturbation)` times
/// `ground_truth` (full resolution) and measures the error on both ends.
pub fn run_refine_demo(
    views: &[View],
    ground_truth: &DepthMap,
    setup: &RefineSetup,
    weights: LossWeights,
    splat: SplatConfig,
) -> Result<RefineDemo> {
    if setup.num_hypotheses < 2 || !(setup.sigma_bins > 0.0) {
        return Err(Error::domain("refinement needs at least 2 hypotheses and a positive start width"));
    }
    let sv = StageViews::new(views, setup.divisor)?;
    let gt = ground_truth.downsample(setup.divisor)?;
    let cam = &sv.cameras[0];
    let hyps = uniform_hypotheses(cam.depth_min, cam.depth_max, setup.num_hypotheses, cam.width, cam.height)?;
    let mut start = gt.clone();
    start.depth.iter_mut().for_each(|d| *d *= 1.0 + setup.perturbation);
    let spacing = cam.depth_range() / (setup.num_hypotheses - 1) as f64;
    let problem = StageProblem::new(&sv, &hyps, weights, splat, setup.descent.include_depth_consistency)?;
    let initial = problem.volume(&gaussian_logits(&hyps, &start, setup.sigma_bins * spacing));
    let initial_depth = regress_depth(&initial, &hyps)?;
    let output = refine_depth_by_descent(&problem, &initial, &setup.descent)?;
    let mae = |d: &DepthMap| d.masked_mae(&gt).ok_or_else(|| Error::domain("no pixel has both an estimate and ground truth"));
    let (mae_before, mae_after) = (mae(&initial_depth)?, mae(&output.depth)?);
    Ok(RefineDemo {
        views: sv,
        hypotheses: hyps,
        ground_truth: gt,
        initial_depth,
        output,
        mae_before,
        mae_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneConfig};

    fn setup() -> (StageViews, DepthHypothesisGrid, DepthMap) {
        let cfg = SceneConfig {
            width: 32,
            height: 24,
            focal: 25.0,
            ..SceneConfig::default()
        };
        let s = generate_synthetic_scene(&cfg).unwrap();
        let views: Vec<View> = s.views.iter().map(|v| View { image: v.image.clone(), camera: v.camera.clone() }).collect();
        let sv = StageViews::new(&views, 1).unwrap();
        let c = &sv.cameras[0];
        let hyps = uniform_hypotheses(c.depth_min, c.depth_max, 16, 32, 24).unwrap();
        (sv, hyps, s.views[0].depth.clone())
    }

    #[test]
    fn zero_steps_returns_initial_regression() {
        let (sv, hyps, gt) = setup();
        let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), SplatConfig::default(), false).unwrap();
        let init = problem.volume(&gaussian_logits(&hyps, &gt, 0.3));
        let out = refine_depth_by_descent(&problem, &init, &RefineConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(out.depth, regress_depth(&init, &hyps).unwrap());
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn trace_is_non_increasing() {
        let (sv, hyps, gt) = setup();
        let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), SplatConfig::default(), true).unwrap();
        let mut start = gt.clone();
        start.depth.iter_mut().for_each(|d| *d *= 1.05);
        let init = problem.volume(&gaussian_logits(&hyps, &start, 0.3));
        let out = refine_depth_by_descent(&problem, &init, &RefineConfig { steps: 10, ..Default::default() }).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.trace);
        assert!(out.trace.last().unwrap() < &out.trace[0]);
    }

    #[test]
    fn rejects_bad_config() {
        let (sv, hyps, gt) = setup();
        let problem = StageProblem::new(&sv, &hyps, LossWeights::default(), SplatConfig::default(), false).unwrap();
        let init = problem.volume(&gaussian_logits(&hyps, &gt, 0.3));
        assert!(refine_depth_by_descent(&problem, &init, &RefineConfig { step_size: 0.0, ..Default::default() }).is_err());
    }
}
