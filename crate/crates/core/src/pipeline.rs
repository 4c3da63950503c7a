//! The three-stage coarse-to-fine cascade.
//!
//! Each stage builds a cost volume at its own resolution, turns it into a
//! probability volume, regresses reference depth, synthesizes every source
//! depth by splatting, renders images in both directions, and evaluates the
//! loss terms. Later stages sample around the nearest-upsampled previous depth.

use rayon::prelude::*;

use crate::camera::CameraParams;
use crate::cost_volume::{
    aggregate_variance, build_feature_volume, extract_features_scaled, regress_depth, regularize_to_probability,
    FeatureVolume, ProbabilityVolume,
};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};
use crate::loss::{combine_stage_terms, stage_terms, LossBreakdown, LossWeights, PairLossInputs, StageLossInputs, StageTerms};
use crate::sampling::{
    adaptive_bins_hypotheses, adaptive_gaussian_hypotheses, entropy_map, uniform_hypotheses, variance_bin_widths,
    DepthHypothesisGrid, UncertaintyMap,
};
use crate::splat::{render_view, smooth_reference_image, RenderedView, SplatConfig, SplatField, SynthesisPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Endpoint-inclusive linspace over the global range.
    Uniform,
    /// Variance-driven bin widths over the global range.
    AdaptiveBins,
    /// Entropy-scaled Gaussian bins around the previous stage's depth.
    AdaptiveGaussian,
}

impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Sampler::Uniform),
            "adaptive_bins" => Ok(Sampler::AdaptiveBins),
            "adaptive_gaussian" => Ok(Sampler::AdaptiveGaussian),
            _ => Err(Error::domain(format!(
                "unknown sampler {s:?} (uniform, adaptive_bins, adaptive_gaussian)"
            ))),
        }
    }
}

impl std::fmt::Display for Sampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampler::Uniform => "uniform",
            Sampler::AdaptiveBins => "adaptive_bins",
            Sampler::AdaptiveGaussian => "adaptive_gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    /// Input resolution divided by this (4, 2, 1 by default).
    pub divisor: usize,
    pub num_hypotheses: usize,
    pub sampler: Sampler,
    /// Window span as a fraction of the global depth range (Gaussian sampler only).
    pub window_ratio: f64,
    pub temperature: f64,
    pub smoothing_radius: usize,
}

impl StageConfig {
    /// Defaults for stage `k` (1-based) of the standard three-stage cascade.
    pub fn default_for(k: usize) -> Self {
        match k {
            1 => Self {
                divisor: 4,
                num_hypotheses: 48,
                sampler: Sampler::AdaptiveBins,
                window_ratio: 1.0,
                temperature: 1e-5,
                smoothing_radius: 1,
            },
            2 => Self {
                divisor: 2,
                num_hypotheses: 32,
                sampler: Sampler::AdaptiveGaussian,
                window_ratio: 0.25,
                temperature: 1e-6,
                smoothing_radius: 1,
            },
            _ => Self {
                divisor: 1,
                num_hypotheses: 8,
                sampler: Sampler::AdaptiveGaussian,
                window_ratio: 0.0625,
                temperature: 3e-7,
                smoothing_radius: 1,
            },
        }
    }

    /// Average bin width of this stage over a global range.
    pub fn spacing(&self, global_range: f64) -> f64 {
        let span = match self.sampler {
            Sampler::AdaptiveGaussian => self.window_ratio * global_range,
            _ => global_range,
        };
        span / self.num_hypotheses as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.divisor == 0 || self.num_hypotheses == 0 {
            return Err(Error::domain("stage divisor and hypothesis count must be positive"));
        }
        if !(self.window_ratio > 0.0) {
            return Err(Error::domain("window ratio must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::domain("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub stages: Vec<StageConfig>,
    pub weights: LossWeights,
    pub splat: SplatConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: (1..=3).map(StageConfig::default_for).collect(),
            weights: LossWeights::default(),
            splat: SplatConfig::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::domain("the cascade needs at least one stage"));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.stages[0].sampler == Sampler::AdaptiveGaussian {
            return Err(Error::domain("the first stage has no previous depth to sample around"));
        }
        for w in self.stages.windows(2) {
            if w[0].divisor % w[1].divisor != 0 {
                return Err(Error::domain(format!(
                    "stage divisor {} does not refine {} by an integer factor",
                    w[1].divisor, w[0].divisor
                )));
            }
        }
        self.weights.validate()?;
        self.splat.validate()
    }
}

/// One input view. The first view of a list is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageGrid,
    pub camera: CameraParams,
}

/// Images and cameras of all views at one stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct StageViews {
    pub images: Vec<ImageGrid>,
    pub cameras: Vec<CameraParams>,
}

impl StageViews {
    pub fn new(views: &[View], divisor: usize) -> Result<Self> {
        let images = views.iter().map(|v| v.image.downsample(divisor)).collect::<Result<Vec<_>>>()?;
        let cameras = views.iter().map(|v| v.camera.downscaled(divisor)).collect::<Result<Vec<_>>>()?;
        Ok(Self { images, cameras })
    }

    pub fn reference(&self) -> (&ImageGrid, &CameraParams) {
        (&self.images[0], &self.cameras[0])
    }

    pub fn num_sources(&self) -> usize {
        self.images.len() - 1
    }
}

/// Everything computed from a probability volume at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageForward {
    pub ref_depth: DepthMap,
    pub synthetic_depths: Vec<DepthMap>,
    pub synthetic_fields: Vec<SplatField>,
    /// Reference rendered into each source view.
    pub rendered_sources: Vec<RenderedView>,
    /// Each source rendered into the reference view from its synthetic depth.
    pub rendered_references: Vec<RenderedView>,
    pub smooth_reference: ImageGrid,
    pub terms: StageTerms,
}

/// Synthesis plans for each source view; they depend only on hypotheses and cameras.
pub fn synthesis_plans(views: &StageViews, hyps: &DepthHypothesisGrid) -> Result<Vec<SynthesisPlan>> {
    views.cameras[1..]
        .iter()
        .map(|src| SynthesisPlan::new(hyps, &views.cameras[0], src))
        .collect()
}

/// Reference pixels whose depth is trusted: every hypothesis was seen by every
/// source and, when sampled around a prior, the prior was valid. Pixels that
/// only part of the sweep reaches regress toward the visible part and are
/// therefore biased.
pub fn reliable_depth_mask(prob: &ProbabilityVolume, hyps: &DepthHypothesisGrid) -> Vec<bool> {
    let m = prob.num_hypotheses;
    (0..prob.width * prob.height)
        .map(|p| {
            prob.valid[p * m..(p + 1) * m].iter().all(|&v| v) && hyps.prior_valid.as_ref().is_none_or(|pv| pv[p])
        })
        .collect()
}

/// Forward pass of one stage given its probability volume. The regressed
/// depth is restricted to `reliable` when given.
pub fn evaluate_stage(
    views: &StageViews,
    hyps: &DepthHypothesisGrid,
    prob: &ProbabilityVolume,
    plans: &[SynthesisPlan],
    reliable: Option<&[bool]>,
    cfg: &SplatConfig,
) -> Result<StageForward> {
    if views.images.len() < 2 {
        return Err(Error::domain("a stage needs a reference and at least one source view"));
    }
    let (ref_img, ref_cam) = views.reference();
    let mut ref_depth = regress_depth(prob, hyps)?;
    if let Some(r) = reliable {
        for (m, &ok) in ref_depth.mask.iter_mut().zip(r) {
            *m &= ok;
        }
        ref_depth.zero_unmasked();
    }
    let mut synthetic_depths = Vec::with_capacity(plans.len());
    let mut synthetic_fields = Vec::with_capacity(plans.len());
    for plan in plans {
        let (d, f) = plan.synthesize(prob, cfg)?;
        synthetic_depths.push(d);
        synthetic_fields.push(f);
    }
    let mut rendered_sources = Vec::with_capacity(plans.len());
    let mut rendered_references = Vec::with_capacity(plans.len());
    for (i, ds) in synthetic_depths.iter().enumerate() {
        let (src_img, src_cam) = (&views.images[i + 1], &views.cameras[i + 1]);
        rendered_sources.push(render_view(ref_img, &ref_depth, ref_cam, src_cam, cfg)?);
        rendered_references.push(render_view(src_img, ds, src_cam, ref_cam, cfg)?);
    }
    let imgs: Vec<ImageGrid> = rendered_references.iter().map(|r| r.image.clone()).collect();
    let masks: Vec<Vec<bool>> = rendered_references.iter().map(|r| r.mask.clone()).collect();
    let smooth_reference = smooth_reference_image(ref_img, &imgs, &masks)?;
    let pairs = (0..plans.len())
        .map(|i| PairLossInputs {
            source_image: &views.images[i + 1],
            source_camera: &views.cameras[i + 1],
            rendered_source: &rendered_sources[i].image,
            rendered_source_mask: &rendered_sources[i].mask,
            rendered_reference: &rendered_references[i].image,
            rendered_reference_mask: &rendered_references[i].mask,
            synthetic_depth: &synthetic_depths[i],
        })
        .collect();
    let inputs = StageLossInputs {
        reference_image: ref_img,
        reference_camera: ref_cam,
        reference_depth: &ref_depth,
        smooth_reference: &smooth_reference,
        pairs,
    };
    let terms = stage_terms(&inputs, cfg)?;
    Ok(StageForward {
        ref_depth,
        synthetic_depths,
        synthetic_fields,
        rendered_sources,
        rendered_references,
        smooth_reference,
        terms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub stage: usize,
    pub config: StageConfig,
    pub views: StageViews,
    pub hypotheses: DepthHypothesisGrid,
    pub plans: Vec<SynthesisPlan>,
    pub probability: ProbabilityVolume,
    pub entropy: UncertaintyMap,
    pub forward: StageForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stages: Vec<StageResult>,
    pub loss: LossBreakdown,
}

impl CascadeOutput {
    pub fn final_stage(&self) -> &StageResult {
        self.stages.last().expect("cascade has at least one stage")
    }
}

fn check_views(views: &[View], cfg: &CascadeConfig) -> Result<()> {
    if views.len() < 2 {
        return Err(Error::domain(format!("the cascade needs at least 2 views, got {}", views.len())));
    }
    let max_div = cfg.stages.iter().map(|s| s.divisor).max().unwrap_or(1);
    for (i, v) in views.iter().enumerate() {
        if (v.image.width, v.image.height) != (v.camera.width, v.camera.height) {
            return Err(Error::shape(format!("view {i}: image size does not match its camera")));
        }
        if v.image.width % max_div != 0 || v.image.height % max_div != 0 {
            return Err(Error::domain(format!(
                "view {i}: {}x{} is not divisible by {max_div}",
                v.image.width, v.image.height
            )));
        }
    }
    Ok(())
}

fn stage_hypotheses(
    k: usize,
    sc: &StageConfig,
    views: &StageViews,
    prev: Option<(&StageResult, usize)>,
) -> Result<DepthHypothesisGrid> {
    let (ref_img, ref_cam) = views.reference();
    let (lo, hi) = (ref_cam.depth_min, ref_cam.depth_max);
    let (w, h) = (ref_img.width, ref_img.height);
    let mut hyps = match sc.sampler {
        Sampler::Uniform => uniform_hypotheses(lo, hi, sc.num_hypotheses, w, h)?,
        Sampler::AdaptiveBins => {
            let lum = ref_img.luminance();
            adaptive_bins_hypotheses(&variance_bin_widths(&lum.data, w, h, sc.num_hypotheses), lo, hi)?
        }
        Sampler::AdaptiveGaussian => {
            let (prev, factor) = prev.ok_or_else(|| Error::domain("Gaussian sampling needs a previous stage"))?;
            let depth = prev.forward.ref_depth.upsample_nearest(factor);
            let entropy = prev.entropy.upsample_nearest(factor);
            adaptive_gaussian_hypotheses(&depth, &entropy, sc.window_ratio * (hi - lo), sc.num_hypotheses, lo, hi)?
        }
    };
    hyps.stage = k;
    Ok(hyps)
}

/// Probability volume of one stage from its views and hypotheses.
pub fn stage_probability(views: &StageViews, hyps: &DepthHypothesisGrid, sc: &StageConfig, stage: usize) -> Result<ProbabilityVolume> {
    let feats = views
        .images
        .iter()
        .map(|img| extract_features_scaled(img, 1, stage))
        .collect::<Result<Vec<_>>>()?;
    let volumes = (1..views.images.len())
        .into_par_iter()
        .map(|i| build_feature_volume(&views.cameras[0], &views.cameras[i], &feats[i], hyps, i))
        .collect::<Result<Vec<FeatureVolume>>>()?;
    let cost = aggregate_variance(&feats[0], &volumes, hyps)?;
    regularize_to_probability(&cost, sc.temperature, sc.smoothing_radius)
}

/// Runs every configured stage on `views` (reference first).
pub fn run_cascade(views: &[View], cfg: &CascadeConfig) -> Result<CascadeOutput> {
    cfg.validate()?;
    check_views(views, cfg)?;
    let mut stages: Vec<StageResult> = Vec::with_capacity(cfg.stages.len());
    for (i, sc) in cfg.stages.iter().enumerate() {
        let k = i + 1;
        let stage_views = StageViews::new(views, sc.divisor)?;
        let prev = stages.last().map(|p| (p, p.config.divisor / sc.divisor));
        let hyps = stage_hypotheses(k, sc, &stage_views, prev)?;
        let probability = stage_probability(&stage_views, &hyps, sc, k)?;
        let plans = synthesis_plans(&stage_views, &hyps)?;
        let reliable = reliable_depth_mask(&probability, &hyps);
        let forward = evaluate_stage(&stage_views, &hyps, &probability, &plans, Some(&reliable), &cfg.splat)?;
        let entropy = entropy_map(&probability);
        stages.push(StageResult {
            stage: k,
            config: *sc,
            views: stage_views,
            hypotheses: hyps,
            plans,
            probability,
            entropy,
            forward,
        });
    }
    let terms: Vec<StageTerms> = stages.iter().map(|s| s.forward.terms).collect();
    let loss = combine_stage_terms(&terms, &cfg.weights)?;
    Ok(CascadeOutput { stages, loss })
}

/// Runs `f` on a dedicated pool of `threads` workers (`None` = rayon default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneConfig};

    fn small_views() -> Vec<View> {
        let cfg = SceneConfig {
            width: 32,
            height: 24,
            focal: 25.0,
            ..SceneConfig::default()
        };
        generate_synthetic_scene(&cfg)
            .unwrap()
            .views
            .into_iter()
            .map(|v| View {
                image: v.image,
                camera: v.camera,
            })
            .collect()
    }

    #[test]
    fn rejects_bad_inputs() {
        let views = small_views();
        let cfg = CascadeConfig::default();
        assert!(run_cascade(&views[..1], &cfg).is_err());
        let mut odd = views.clone();
        odd[0].image = ImageGrid::new(30, 24, 1);
        assert!(run_cascade(&odd, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.stages[0].sampler = Sampler::AdaptiveGaussian;
        assert!(run_cascade(&views, &bad).is_err());
    }

    #[test]
    fn cascade_shapes_and_determinism() {
        let views = small_views();
        let cfg = CascadeConfig::default();
        let a = run_cascade(&views, &cfg).unwrap();
        assert_eq!(a.stages.len(), 3);
        let dims: Vec<(usize, usize, usize)> = a
            .stages
            .iter()
            .map(|s| (s.hypotheses.width, s.hypotheses.height, s.hypotheses.num_hypotheses))
            .collect();
        assert_eq!(dims, vec![(8, 6, 48), (16, 12, 32), (32, 24, 8)]);
        for s in &a.stages {
            s.hypotheses.validate().unwrap();
            assert_eq!(s.forward.synthetic_depths.len(), 2);
        }
        let b = with_threads(Some(2), || run_cascade(&views, &cfg)).unwrap().unwrap();
        assert_eq!(a, b);
    }
}
