//! Feature extraction, plane-sweep feature volumes, variance aggregation,
//! probability volumes, and depth regression.

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camera::{warp_pixel, CameraParams};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};
use crate::sampling::DepthHypothesisGrid;

/// Logit assigned to hypotheses with no valid source sample.
pub const INVALID_LOGIT: f64 = -1e6;

/// Channels produced by [`extract_features`].
pub const FEATURE_CHANNELS: usize = 4;

/// Downsampling factor of a cascade stage: 4, 2, 1 for stages 1, 2, 3.
pub fn stage_downsample(stage: usize) -> usize {
    match stage {
        1 => 4,
        2 => 2,
        _ => 1,
    }
}

/// Hand-crafted per-pixel features at one stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: ImageGrid,
    pub stage: usize,
}

/// Area-downsamples `image` for `stage` and computes
/// `[luminance, ∂x luminance, ∂y luminance, 3×3 mean luminance]`.
pub fn extract_features(image: &ImageGrid, stage: usize) -> Result<FeatureGrid> {
    extract_features_scaled(image, stage_downsample(stage), stage)
}

pub fn extract_features_scaled(image: &ImageGrid, factor: usize, stage: usize) -> Result<FeatureGrid> {
    if image.width == 0 || image.height == 0 || image.channels == 0 {
        return Err(Error::domain("cannot extract features from an empty image"));
    }
    let lum = image.downsample(factor)?.luminance();
    let (w, h) = (lum.width, lum.height);
    let l = |x: usize, y: usize| lum.data[y * w + x];
    let mut values = ImageGrid::new(w, h, FEATURE_CHANNELS);
    values
        .data
        .par_chunks_mut(w * FEATURE_CHANNELS)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let gx = if w < 2 {
                    0.0
                } else if x == 0 {
                    l(1, y) - l(0, y)
                } else if x == w - 1 {
                    l(x, y) - l(x - 1, y)
                } else {
                    0.5 * (l(x + 1, y) - l(x - 1, y))
                };
                let gy = if h < 2 {
                    0.0
                } else if y == 0 {
                    l(x, 1) - l(x, 0)
                } else if y == h - 1 {
                    l(x, y) - l(x, y - 1)
                } else {
                    0.5 * (l(x, y + 1) - l(x, y - 1))
                };
                let mut mean = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        mean += l(xx, yy);
                    }
                }
                let o = &mut row[x * FEATURE_CHANNELS..(x + 1) * FEATURE_CHANNELS];
                o[0] = l(x, y);
                o[1] = gx;
                o[2] = gy;
                o[3] = mean / 9.0;
            }
        });
    Ok(FeatureGrid { values, stage })
}

/// Source features resampled onto the reference pixel grid for every hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub view_index: usize,
    pub width: usize,
    pub height: usize,
    pub num_hypotheses: usize,
    pub channels: usize,
    /// `((y * W + x) * M + j) * C + c`
    pub values: Vec<f64>,
    /// `(y * W + x) * M + j`
    pub validity: Vec<bool>,
}

/// Warps `src_feat` into the reference view at every hypothesis with
/// bilinear sampling. Out-of-image or behind-camera samples are invalid and zero.
pub fn build_feature_volume(
    reference: &CameraParams,
    source: &CameraParams,
    src_feat: &FeatureGrid,
    hyps: &DepthHypothesisGrid,
    view_index: usize,
) -> Result<FeatureVolume> {
    let f = &src_feat.values;
    if (f.width, f.height) != (source.width, source.height) {
        return Err(Error::domain(format!(
            "source features are {}x{} but the source camera is {}x{}",
            f.width, f.height, source.width, source.height
        )));
    }
    if (hyps.width, hyps.height) != (reference.width, reference.height) {
        return Err(Error::domain(format!(
            "hypotheses are {}x{} but the reference camera is {}x{}",
            hyps.width, hyps.height, reference.width, reference.height
        )));
    }
    let (w, m, c) = (hyps.width, hyps.num_hypotheses, f.channels);
    let n = hyps.pixel_count();
    let mut values = vec![0.0; n * m * c];
    let mut validity = vec![false; n * m];
    values
        .par_chunks_mut(m * c)
        .zip(validity.par_chunks_mut(m))
        .enumerate()
        .for_each(|(p, (vals, valid))| {
            let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
            for (j, &d) in hyps.pixel_depths(p).iter().enumerate() {
                let out = &mut vals[j * c..(j + 1) * c];
                valid[j] = match warp_pixel(reference, source, pixel, d) {
                    Ok((q, _)) => f.sample_bilinear(q.x, q.y, out),
                    Err(_) => false,
                };
            }
        });
    Ok(FeatureVolume {
        view_index,
        width: w,
        height: hyps.height,
        num_hypotheses: m,
        channels: c,
        values,
        validity,
    })
}

/// Scalar matching cost per pixel and hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub num_hypotheses: usize,
    pub cost: Vec<f64>,
    pub validity: Vec<bool>,
}

/// Variance of the `N` view features (reference broadcast over hypotheses),
/// averaged over channels. Sources are summed in ascending `view_index` order.
pub fn aggregate_variance(
    ref_feat: &FeatureGrid,
    warped: &[FeatureVolume],
    hyps: &DepthHypothesisGrid,
) -> Result<CostVolume> {
    if warped.is_empty() {
        return Err(Error::domain("variance aggregation needs at least two views"));
    }
    let r = &ref_feat.values;
    let (w, h, m, c) = (hyps.width, hyps.height, hyps.num_hypotheses, r.channels);
    if (r.width, r.height) != (w, h) {
        return Err(Error::shape("reference features do not match the hypothesis grid"));
    }
    for v in warped {
        if (v.width, v.height, v.num_hypotheses, v.channels) != (w, h, m, c) {
            return Err(Error::shape(format!("feature volume of view {} has a different shape", v.view_index)));
        }
    }
    let mut order: Vec<&FeatureVolume> = warped.iter().collect();
    order.sort_by_key(|v| v.view_index);
    let views = (order.len() + 1) as f64;
    let n = w * h;
    let mut cost = vec![0.0; n * m];
    let mut validity = vec![false; n * m];
    cost.par_chunks_mut(m)
        .zip(validity.par_chunks_mut(m))
        .enumerate()
        .for_each(|(p, (cs, vs))| {
            let rf = r.pixel(p % w, p / w);
            for j in 0..m {
                let e = p * m + j;
                let mut total = 0.0;
                for ch in 0..c {
                    let mut sum = rf[ch];
                    for v in &order {
                        sum += v.values[e * c + ch];
                    }
                    let mean = sum / views;
                    let mut sq = (rf[ch] - mean) * (rf[ch] - mean);
                    for v in &order {
                        let d = v.values[e * c + ch] - mean;
                        sq += d * d;
                    }
                    total += sq / views;
                }
                cs[j] = total / c as f64;
                vs[j] = order.iter().all(|v| v.validity[e]);
            }
        });
    Ok(CostVolume {
        width: w,
        height: h,
        num_hypotheses: m,
        cost,
        validity,
    })
}

/// Per-pixel softmax distribution over hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub width: usize,
    pub height: usize,
    pub num_hypotheses: usize,
    pub prob: Vec<f64>,
    pub logits: Vec<f64>,
    /// Hypotheses that had a valid cost.
    pub valid: Vec<bool>,
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl ProbabilityVolume {
    /// Softmax of `logits`; all entries valid.
    pub fn from_logits(width: usize, height: usize, m: usize, logits: Vec<f64>) -> Self {
        let valid = vec![true; logits.len()];
        Self::from_logits_masked(width, height, m, logits, valid)
    }

    pub fn from_logits_masked(width: usize, height: usize, m: usize, logits: Vec<f64>, valid: Vec<bool>) -> Self {
        assert_eq!(logits.len(), width * height * m);
        let mut prob = vec![0.0; logits.len()];
        prob.par_chunks_mut(m)
            .zip(logits.par_chunks(m))
            .for_each(|(p, l)| softmax_into(l, p));
        Self {
            width,
            height,
            num_hypotheses: m,
            prob,
            logits,
            valid,
        }
    }

    /// Wraps given probabilities, with `ln p` as logits.
    pub fn from_probabilities(width: usize, height: usize, m: usize, prob: Vec<f64>) -> Self {
        assert_eq!(prob.len(), width * height * m);
        let logits = prob.iter().map(|&p| if p > 0.0 { p.ln() } else { INVALID_LOGIT }).collect();
        Self {
            width,
            height,
            num_hypotheses: m,
            valid: vec![true; prob.len()],
            prob,
            logits,
        }
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.prob[p * self.num_hypotheses..(p + 1) * self.num_hypotheses]
    }

    pub fn pixel_has_valid(&self, p: usize) -> bool {
        let m = self.num_hypotheses;
        self.valid[p * m..(p + 1) * m].iter().any(|&v| v)
    }
}

/// Box mean along one axis over valid entries. `stride` steps along the axis,
/// `len` is its extent; `sums`/`counts` are updated in place.
fn box_pass(sums: &mut [f64], counts: &mut [f64], dims: (usize, usize, usize), axis: usize, radius: usize) {
    let (w, h, m) = dims;
    let (len, stride) = match axis {
        0 => (w, m),
        1 => (h, w * m),
        _ => (m, 1),
    };
    let src_s = sums.to_vec();
    let src_c = counts.to_vec();
    let lines: Vec<usize> = (0..w * h * m)
        .filter(|&i| {
            let (j, x, y) = (i % m, (i / m) % w, i / (w * m));
            match axis {
                0 => x == 0,
                1 => y == 0,
                _ => j == 0,
            }
        })
        .collect();
    for start in lines {
        for k in 0..len {
            let lo = k.saturating_sub(radius);
            let hi = (k + radius).min(len - 1);
            let (mut s, mut c) = (0.0, 0.0);
            for t in lo..=hi {
                s += src_s[start + t * stride];
                c += src_c[start + t * stride];
            }
            sums[start + k * stride] = s;
            counts[start + k * stride] = c;
        }
    }
}

/// Deterministic stand-in for learned cost regularization: box-smooth valid
/// costs over `(x, y, j)` with `smoothing_radius`, negate, divide by
/// `temperature`, and softmax over hypotheses.
pub fn regularize_to_probability(cost: &CostVolume, temperature: f64, smoothing_radius: usize) -> Result<ProbabilityVolume> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    let (w, h, m) = (cost.width, cost.height, cost.num_hypotheses);
    let mut sums: Vec<f64> = cost
        .cost
        .iter()
        .zip(&cost.validity)
        .map(|(&c, &v)| if v { c } else { 0.0 })
        .collect();
    let mut counts: Vec<f64> = cost.validity.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    if smoothing_radius > 0 {
        for axis in 0..3 {
            box_pass(&mut sums, &mut counts, (w, h, m), axis, smoothing_radius);
        }
    }
    let logits: Vec<f64> = (0..sums.len())
        .map(|i| {
            if cost.validity[i] && counts[i] > 0.0 {
                -(sums[i] / counts[i]) / temperature
            } else {
                INVALID_LOGIT
            }
        })
        .collect();
    Ok(ProbabilityVolume::from_logits_masked(w, h, m, logits, cost.validity.clone()))
}

/// `D(p) = Σ_j d_j(p) P(p, j)`; valid where any hypothesis was valid.
pub fn regress_depth(prob: &ProbabilityVolume, hyps: &DepthHypothesisGrid) -> Result<DepthMap> {
    check_pair(prob, hyps)?;
    let n = prob.width * prob.height;
    let mut depth = vec![0.0; n];
    let mut mask = vec![false; n];
    for p in 0..n {
        if prob.pixel_has_valid(p) {
            depth[p] = prob.pixel(p).iter().zip(hyps.pixel_depths(p)).map(|(w, d)| w * d).sum();
            mask[p] = true;
        }
    }
    DepthMap::from_parts(prob.width, prob.height, depth, mask)
}

fn check_pair(prob: &ProbabilityVolume, hyps: &DepthHypothesisGrid) -> Result<()> {
    if (prob.width, prob.height, prob.num_hypotheses) != (hyps.width, hyps.height, hyps.num_hypotheses) {
        return Err(Error::shape(format!(
            "probability volume {}x{}x{} vs hypotheses {}x{}x{}",
            prob.width, prob.height, prob.num_hypotheses, hyps.width, hyps.height, hyps.num_hypotheses
        )));
    }
    Ok(())
}

/// Gradient with respect to probabilities of `Σ_p g(p) D(p)`: `g(p) d_j(p)`.
pub fn regress_depth_vjp_prob(prob: &ProbabilityVolume, hyps: &DepthHypothesisGrid, g_depth: &[f64]) -> Vec<f64> {
    let m = prob.num_hypotheses;
    let mut g = vec![0.0; prob.prob.len()];
    for (p, &gd) in g_depth.iter().enumerate() {
        if gd == 0.0 || !prob.pixel_has_valid(p) {
            continue;
        }
        for (gj, &d) in g[p * m..(p + 1) * m].iter_mut().zip(hyps.pixel_depths(p)) {
            *gj = gd * d;
        }
    }
    g
}

/// Chains a gradient with respect to probabilities through the softmax:
/// `∂/∂l_j = P_j (g_j - Σ_k P_k g_k)`. Invalid entries get zero.
pub fn softmax_vjp(prob: &ProbabilityVolume, g_prob: &[f64]) -> Vec<f64> {
    let m = prob.num_hypotheses;
    let mut out = vec![0.0; g_prob.len()];
    out.par_chunks_mut(m).enumerate().for_each(|(p, o)| {
        let ps = prob.pixel(p);
        let g = &g_prob[p * m..(p + 1) * m];
        let dot: f64 = ps.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..m {
            o[j] = if prob.valid[p * m + j] { ps[j] * (g[j] - dot) } else { 0.0 };
        }
    });
    out
}

/// `∂D(p)/∂logits(p, ·) = P ⊙ (d - D)` scaled by `g(p)`, for all pixels.
pub fn regress_depth_vjp_logits(prob: &ProbabilityVolume, hyps: &DepthHypothesisGrid, g_depth: &[f64]) -> Vec<f64> {
    softmax_vjp(prob, &regress_depth_vjp_prob(prob, hyps, g_depth))
}
