//! Unsupervised loss terms: photometric consistency, SSIM, edge-aware depth
//! smoothness, and reference-source depth consistency.
//!
//! All terms are means over their valid pixels, so they do not scale with
//! resolution. Spatial gradients are forward differences; the last row and
//! column never appear in a gradient mean.

use rayon::prelude::*;

use crate::camera::CameraParams;
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};
use crate::splat::{forward_project_depth, SplatConfig};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the photometric, SSIM, smoothness, and depth-consistency terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub ssim: f64,
    pub smoothness: f64,
    pub depth_consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 12.0,
            ssim: 6.0,
            smoothness: 0.05,
            depth_consistency: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.photometric, self.ssim, self.smoothness, self.depth_consistency];
        if w.iter().all(|&v| v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain(format!("loss weights must be finite and non-negative, got {w:?}")))
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            photometric: self.photometric * k,
            ssim: self.ssim * k,
            smoothness: self.smoothness * k,
            depth_consistency: self.depth_consistency * k,
        }
    }
}

/// A scalar loss and whether its averaging set was empty (value then 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty_mask: bool,
}

impl LossValue {
    fn of(sum: f64, n: usize) -> Self {
        if n == 0 {
            Self {
                value: 0.0,
                empty_mask: true,
            }
        } else {
            Self {
                value: sum / n as f64,
                empty_mask: false,
            }
        }
    }
}

fn check_pair(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Result<()> {
    rendered.ensure_same_shape(real, "rendered vs real image")?;
    if mask.len() != rendered.pixel_count() {
        return Err(Error::shape(format!(
            "mask has {} entries for a {}x{} image",
            mask.len(),
            rendered.width,
            rendered.height
        )));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pixels with both forward neighbors inside the image and masked.
#[inline]
fn gradient_valid(mask: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    x + 1 < w && y + 1 < h && mask[y * w + x] && mask[y * w + x + 1] && mask[(y + 1) * w + x]
}

/// Masked mean `|Î - I|` plus masked mean `|∇Î - ∇I|` (x and y summed).
pub fn photometric_loss(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Result<LossValue> {
    check_pair(rendered, real, mask)?;
    let (w, h, c) = (rendered.width, rendered.height, rendered.channels);
    let (a, b) = (&rendered.data, &real.data);
    let mut abs_sum = 0.0;
    let mut n = 0usize;
    let mut grad_sum = 0.0;
    let mut ng = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            n += 1;
            for ch in 0..c {
                abs_sum += (a[p * c + ch] - b[p * c + ch]).abs();
            }
            if gradient_valid(mask, w, h, x, y) {
                ng += 1;
                for ch in 0..c {
                    let (i, ix, iy) = (p * c + ch, (p + 1) * c + ch, (p + w) * c + ch);
                    grad_sum += ((a[ix] - a[i]) - (b[ix] - b[i])).abs();
                    grad_sum += ((a[iy] - a[i]) - (b[iy] - b[i])).abs();
                }
            }
        }
    }
    if n == 0 {
        return Ok(LossValue::of(0.0, 0));
    }
    let abs_term = abs_sum / (n * c) as f64;
    let grad_term = if ng > 0 { grad_sum / (ng * c) as f64 } else { 0.0 };
    Ok(LossValue {
        value: abs_term + grad_term,
        empty_mask: false,
    })
}

/// Gradient of [`photometric_loss`] with respect to the rendered image.
pub fn photometric_loss_vjp(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Vec<f64> {
    let (w, h, c) = (rendered.width, rendered.height, rendered.channels);
    let (a, b) = (&rendered.data, &real.data);
    let n = mask.iter().filter(|&&m| m).count();
    let mut g = vec![0.0; a.len()];
    if n == 0 {
        return g;
    }
    let ng = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| gradient_valid(mask, w, h, x, y))
        .count();
    let ka = 1.0 / (n * c) as f64;
    let kg = if ng > 0 { 1.0 / (ng * c) as f64 } else { 0.0 };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            for ch in 0..c {
                g[p * c + ch] += ka * sign(a[p * c + ch] - b[p * c + ch]);
            }
            if gradient_valid(mask, w, h, x, y) {
                for ch in 0..c {
                    let (i, ix, iy) = (p * c + ch, (p + 1) * c + ch, (p + w) * c + ch);
                    let sx = kg * sign((a[ix] - a[i]) - (b[ix] - b[i]));
                    let sy = kg * sign((a[iy] - a[i]) - (b[iy] - b[i]));
                    g[ix] += sx;
                    g[iy] += sy;
                    g[i] -= sx + sy;
                }
            }
        }
    }
    g
}

/// Signs of every absolute-value argument in [`photometric_loss`]; changes
/// between two evaluation points mean the loss crossed a kink.
pub fn photometric_residual_signs(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Vec<i8> {
    let (w, h, c) = (rendered.width, rendered.height, rendered.channels);
    let (a, b) = (&rendered.data, &real.data);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            for ch in 0..c {
                out.push(sign(a[p * c + ch] - b[p * c + ch]) as i8);
            }
            if gradient_valid(mask, w, h, x, y) {
                for ch in 0..c {
                    let (i, ix, iy) = (p * c + ch, (p + 1) * c + ch, (p + w) * c + ch);
                    out.push(sign((a[ix] - a[i]) - (b[ix] - b[i])) as i8);
                    out.push(sign((a[iy] - a[i]) - (b[iy] - b[i])) as i8);
                }
            }
        }
    }
    out
}

/// SSIM is evaluated at pixels whose whole 3×3 window is inside the image and masked.
fn ssim_valid(mask: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return false;
    }
    (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask[yy * w + xx]))
}

#[derive(Debug, Clone, Copy, Default)]
struct SsimWindow {
    ssim: f64,
    mu_x: f64,
    mu_y: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
}

fn ssim_window(x: &ImageGrid, y: &ImageGrid, px: usize, py: usize, ch: usize) -> SsimWindow {
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for yy in py - 1..=py + 1 {
        for xx in px - 1..=px + 1 {
            let a = x.get(xx, yy, ch);
            let b = y.get(xx, yy, ch);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
    }
    let k = 1.0 / 9.0;
    let (mu_x, mu_y) = (sx * k, sy * k);
    let var_x = sxx * k - mu_x * mu_x;
    let var_y = syy * k - mu_y * mu_y;
    let cov = sxy * k - mu_x * mu_y;
    let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
    let a2 = 2.0 * cov + SSIM_C2;
    let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
    let b2 = var_x + var_y + SSIM_C2;
    let ssim = a1 * a2 / (b1 * b2);
    // ∂S/∂x_k = alpha + beta (y_k - μy) - gamma (x_k - μx)
    SsimWindow {
        ssim,
        mu_x,
        mu_y,
        alpha: k * (2.0 * mu_y * a2 / (b1 * b2) - ssim * 2.0 * mu_x / b1),
        beta: k * 2.0 * a1 / (b1 * b2),
        gamma: k * 2.0 * ssim / b2,
    }
}

fn ssim_windows(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> (Vec<Option<SsimWindow>>, usize) {
    let (w, h, c) = (rendered.width, rendered.height, rendered.channels);
    let windows: Vec<Option<SsimWindow>> = (0..w * h * c)
        .into_par_iter()
        .map(|i| {
            let (p, ch) = (i / c, i % c);
            let (x, y) = (p % w, p / w);
            ssim_valid(mask, w, h, x, y).then(|| ssim_window(rendered, real, x, y, ch))
        })
        .collect();
    let n = windows.iter().filter(|s| s.is_some()).count();
    (windows, n)
}

/// `1 - mean SSIM` with a 3×3 uniform window over fully masked windows.
pub fn ssim_loss(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Result<LossValue> {
    check_pair(rendered, real, mask)?;
    let (windows, n) = ssim_windows(rendered, real, mask);
    if n == 0 {
        return Ok(LossValue::of(0.0, 0));
    }
    let sum: f64 = windows.iter().flatten().map(|s| s.ssim).sum();
    Ok(LossValue {
        value: 1.0 - sum / n as f64,
        empty_mask: false,
    })
}

/// Gradient of [`ssim_loss`] with respect to the rendered image.
pub fn ssim_loss_vjp(rendered: &ImageGrid, real: &ImageGrid, mask: &[bool]) -> Vec<f64> {
    let (w, h, c) = (rendered.width, rendered.height, rendered.channels);
    let (windows, n) = ssim_windows(rendered, real, mask);
    let mut g = vec![0.0; rendered.data.len()];
    if n == 0 {
        return g;
    }
    let scale = -1.0 / n as f64;
    g.par_iter_mut().enumerate().for_each(|(i, gi)| {
        let (p, ch) = (i / c, i % c);
        let (x, y) = (p % w, p / w);
        let (xk, yk) = (rendered.data[i], real.data[i]);
        let mut acc = 0.0;
        for cy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for cx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if let Some(s) = &windows[(cy * w + cx) * c + ch] {
                    acc += s.alpha + s.beta * (yk - s.mu_y) - s.gamma * (xk - s.mu_x);
                }
            }
        }
        *gi = scale * acc;
    });
    g
}

fn guide_gradient(guide: &ImageGrid, p: usize, q: usize) -> f64 {
    let c = guide.channels;
    (0..c).map(|ch| (guide.data[q * c + ch] - guide.data[p * c + ch]).abs()).sum::<f64>() / c as f64
}

/// Mean over valid forward-difference pixels of
/// `e^{-|∇x Ĩ|}|∇x D| + e^{-|∇y Ĩ|}|∇y D|`. Multi-channel guides use the
/// channel-mean absolute gradient.
pub fn depth_smoothness_loss(depth: &DepthMap, guide: &ImageGrid) -> Result<LossValue> {
    let (w, h) = (depth.width, depth.height);
    if (guide.width, guide.height) != (w, h) {
        return Err(Error::shape("depth map and guide image sizes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !gradient_valid(&depth.mask, w, h, x, y) {
                continue;
            }
            let p = y * w + x;
            let (px, py) = (p + 1, p + w);
            sum += (-guide_gradient(guide, p, px)).exp() * (depth.depth[px] - depth.depth[p]).abs();
            sum += (-guide_gradient(guide, p, py)).exp() * (depth.depth[py] - depth.depth[p]).abs();
            n += 1;
        }
    }
    Ok(LossValue::of(sum, n))
}

/// Per-pixel smoothness penalty (unnormalized), 0 where not evaluated.
pub fn depth_smoothness_map(depth: &DepthMap, guide: &ImageGrid) -> Vec<f64> {
    let (w, h) = (depth.width, depth.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if gradient_valid(&depth.mask, w, h, x, y) {
                let p = y * w + x;
                out[p] = (-guide_gradient(guide, p, p + 1)).exp() * (depth.depth[p + 1] - depth.depth[p]).abs()
                    + (-guide_gradient(guide, p, p + w)).exp() * (depth.depth[p + w] - depth.depth[p]).abs();
            }
        }
    }
    out
}

/// Gradient of [`depth_smoothness_loss`] with respect to depth; the guide is held fixed.
pub fn depth_smoothness_vjp(depth: &DepthMap, guide: &ImageGrid) -> Vec<f64> {
    let (w, h) = (depth.width, depth.height);
    let valid: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| gradient_valid(&depth.mask, w, h, x, y))
        .collect();
    let mut g = vec![0.0; w * h];
    if valid.is_empty() {
        return g;
    }
    let k = 1.0 / valid.len() as f64;
    for (x, y) in valid {
        let p = y * w + x;
        for q in [p + 1, p + w] {
            let s = k * (-guide_gradient(guide, p, q)).exp() * sign(depth.depth[q] - depth.depth[p]);
            g[q] += s;
            g[p] -= s;
        }
    }
    g
}

/// Gradient of [`depth_smoothness_loss`] with respect to the guide image, depth held fixed.
pub fn depth_smoothness_vjp_guide(depth: &DepthMap, guide: &ImageGrid) -> Vec<f64> {
    let (w, h, c) = (depth.width, depth.height, guide.channels);
    let valid: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| gradient_valid(&depth.mask, w, h, x, y))
        .collect();
    let mut g = vec![0.0; guide.data.len()];
    if valid.is_empty() {
        return g;
    }
    let k = 1.0 / valid.len() as f64;
    for (x, y) in valid {
        let p = y * w + x;
        for q in [p + 1, p + w] {
            let t = k * (-guide_gradient(guide, p, q)).exp() * (depth.depth[q] - depth.depth[p]).abs();
            for ch in 0..c {
                let s = -t * sign(guide.data[q * c + ch] - guide.data[p * c + ch]) / c as f64;
                g[q * c + ch] += s;
                g[p * c + ch] -= s;
            }
        }
    }
    g
}

/// Signs of the guide differences the smoothness weights depend on, one per
/// channel and direction. Used to detect kinks.
pub fn guide_difference_signs(guide: &ImageGrid) -> Vec<i8> {
    let (w, h, c) = (guide.width, guide.height, guide.channels);
    let mut out = Vec::with_capacity(2 * guide.data.len());
    for p in 0..w * h {
        let (x, y) = (p % w, p / w);
        for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
            for ch in 0..c {
                out.push(sign(guide.data[q * c + ch] - guide.data[p * c + ch]) as i8);
            }
        }
    }
    out
}

/// Mean over source views of the masked L1 gap between the forward-projected
/// reference depth and that view's synthetic depth. Views with an empty
/// intersection contribute 0 and set the flag.
pub fn depth_consistency_loss(
    ref_depth: &DepthMap,
    synthetic: &[DepthMap],
    reference: &CameraParams,
    sources: &[CameraParams],
    cfg: &SplatConfig,
) -> Result<LossValue> {
    if synthetic.is_empty() || synthetic.len() != sources.len() {
        return Err(Error::domain(format!(
            "depth consistency needs matching, non-empty source lists ({} depths, {} cameras)",
            synthetic.len(),
            sources.len()
        )));
    }
    let mut total = 0.0;
    let mut any_empty = false;
    for (ds, src) in synthetic.iter().zip(sources) {
        let (projected, _, _) = forward_project_depth(ref_depth, reference, src, cfg)?;
        if (projected.width, projected.height) != (ds.width, ds.height) {
            return Err(Error::shape("synthetic depth does not match its source camera"));
        }
        let (s, n) = l1_on_intersection(&projected, ds);
        if n == 0 {
            any_empty = true;
        } else {
            total += s / n as f64;
        }
    }
    Ok(LossValue {
        value: total / synthetic.len() as f64,
        empty_mask: any_empty,
    })
}

pub(crate) fn l1_on_intersection(a: &DepthMap, b: &DepthMap) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..a.depth.len() {
        if a.mask[i] && b.mask[i] {
            s += (a.depth[i] - b.depth[i]).abs();
            n += 1;
        }
    }
    (s, n)
}

/// Unweighted loss components of one cascade stage.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTerms {
    /// Photometric terms summed over views and both directions.
    pub pc: f64,
    /// SSIM terms summed over views and both directions.
    pub ssim: f64,
    pub ds: f64,
    pub dc: f64,
    /// Count of component evaluations whose mask was empty.
    pub empty_masks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLoss {
    pub terms: StageTerms,
    pub total: f64,
}

/// Weighted per-stage and summed losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub stages: Vec<StageLoss>,
    pub pc: f64,
    pub ssim: f64,
    pub ds: f64,
    pub dc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Flat `(key, value)` pairs: `stage<k>.<term>` then `total.<term>` and `total`.
    pub fn key_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            let st = k + 1;
            out.push((format!("stage{st}.pc"), s.terms.pc));
            out.push((format!("stage{st}.ssim"), s.terms.ssim));
            out.push((format!("stage{st}.ds"), s.terms.ds));
            out.push((format!("stage{st}.dc"), s.terms.dc));
            out.push((format!("stage{st}.total"), s.total));
        }
        out.push(("total.pc".into(), self.pc));
        out.push(("total.ssim".into(), self.ssim));
        out.push(("total.ds".into(), self.ds));
        out.push(("total.dc".into(), self.dc));
        out.push(("total".into(), self.total));
        out
    }
}

/// `L_k = λ1 pc + λ2 ssim + λ3 ds + λ4 dc` per stage, summed over stages.
pub fn combine_stage_terms(stages: &[StageTerms], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut out = LossBreakdown {
        stages: Vec::with_capacity(stages.len()),
        pc: 0.0,
        ssim: 0.0,
        ds: 0.0,
        dc: 0.0,
        total: 0.0,
    };
    for t in stages {
        let total = weights.photometric * t.pc + weights.ssim * t.ssim + weights.smoothness * t.ds + weights.depth_consistency * t.dc;
        out.stages.push(StageLoss { terms: *t, total });
        out.pc += t.pc;
        out.ssim += t.ssim;
        out.ds += t.ds;
        out.dc += t.dc;
        out.total += total;
    }
    Ok(out)
}

/// One reference-source pair of a stage.
#[derive(Debug, Clone, Copy)]
pub struct PairLossInputs<'a> {
    pub source_image: &'a ImageGrid,
    pub source_camera: &'a CameraParams,
    /// Source view rendered from the reference, with its mask.
    pub rendered_source: &'a ImageGrid,
    pub rendered_source_mask: &'a [bool],
    /// Reference view rendered from this source, with its mask.
    pub rendered_reference: &'a ImageGrid,
    pub rendered_reference_mask: &'a [bool],
    pub synthetic_depth: &'a DepthMap,
}

/// Everything one stage's loss reads.
#[derive(Debug, Clone)]
pub struct StageLossInputs<'a> {
    pub reference_image: &'a ImageGrid,
    pub reference_camera: &'a CameraParams,
    pub reference_depth: &'a DepthMap,
    pub smooth_reference: &'a ImageGrid,
    pub pairs: Vec<PairLossInputs<'a>>,
}

pub fn stage_terms(inputs: &StageLossInputs<'_>, cfg: &SplatConfig) -> Result<StageTerms> {
    if inputs.pairs.is_empty() {
        return Err(Error::domain("a stage needs at least one source view"));
    }
    let mut t = StageTerms::default();
    let mut count = |v: LossValue| {
        if v.empty_mask {
            t.empty_masks += 1;
        }
        v.value
    };
    let mut pc = 0.0;
    let mut ssim = 0.0;
    for pair in &inputs.pairs {
        pc += count(photometric_loss(pair.rendered_source, pair.source_image, pair.rendered_source_mask)?);
        pc += count(photometric_loss(pair.rendered_reference, inputs.reference_image, pair.rendered_reference_mask)?);
        ssim += count(ssim_loss(pair.rendered_source, pair.source_image, pair.rendered_source_mask)?);
        ssim += count(ssim_loss(pair.rendered_reference, inputs.reference_image, pair.rendered_reference_mask)?);
    }
    let ds = count(depth_smoothness_loss(inputs.reference_depth, inputs.smooth_reference)?);
    let synthetic: Vec<DepthMap> = inputs.pairs.iter().map(|p| p.synthetic_depth.clone()).collect();
    let cams: Vec<CameraParams> = inputs.pairs.iter().map(|p| p.source_camera.clone()).collect();
    let dc = count(depth_consistency_loss(inputs.reference_depth, &synthetic, inputs.reference_camera, &cams, cfg)?);
    t.pc = pc;
    t.ssim = ssim;
    t.ds = ds;
    t.dc = dc;
    Ok(t)
}

/// Full objective over a list of stages.
pub fn total_loss(stages: &[StageLossInputs<'_>], weights: &LossWeights, cfg: &SplatConfig) -> Result<LossBreakdown> {
    let terms = stages.iter().map(|s| stage_terms(s, cfg)).collect::<Result<Vec<_>>>()?;
    combine_stage_terms(&terms, weights)
}
