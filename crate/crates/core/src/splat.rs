//! Forward splatting from one view into another.
//!
//! Every splatted element lands at a continuous sub-pixel position and is
//! scattered onto its four integer neighbors with bilinear coefficients (the
//! transpose of bilinear sampling). A target pixel's value is the weighted
//! payload sum over `weight sum + ε`, kept only where the weight sum exceeds
//! `τ`. The same kernel synthesizes source depths from a probability volume
//! and renders images in both directions.
//!
//! Accumulation runs serially in element order (reference raster order, then
//! hypothesis order), so results never depend on the thread count.

use arrayvec::ArrayVec;
use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camera::{warp_pixel, warp_pixel_with_jacobian, CameraParams, WarpJacobian};
use crate::cost_volume::ProbabilityVolume;
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};
use crate::sampling::DepthHypothesisGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatConfig {
    /// Minimum accumulated weight for a target pixel to be valid.
    pub tau: f64,
    /// Denominator stabilizer.
    pub epsilon: f64,
    /// Optional soft z-test: contributions are discounted by
    /// `exp(-(d' - d'_min)² / σ²)` where `d'_min` is the nearest depth landing
    /// on the same target pixel. Off by default.
    pub soft_z_sigma: Option<f64>,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            tau: 0.001,
            epsilon: 1e-8,
            soft_z_sigma: None,
        }
    }
}

impl SplatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::domain(format!(
                "splat config needs tau >= 0 and epsilon > 0, got tau={} epsilon={}",
                self.tau, self.epsilon
            )));
        }
        if let Some(s) = self.soft_z_sigma {
            if !(s > 0.0) {
                return Err(Error::domain("soft z-test sigma must be positive"));
            }
        }
        Ok(())
    }
}

/// One bilinear splat coefficient and its gradient with respect to the sub-pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatTap {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
    pub d_weight: [f64; 2],
}

/// Bilinear coefficients of the up to four integer pixels around `subpixel`,
/// in the order `(x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)`. Neighbors
/// outside the `width × height` image are dropped.
pub fn splat_weights(subpixel: Vector2<f64>, width: usize, height: usize) -> ArrayVec<SplatTap, 4> {
    let mut taps = ArrayVec::new();
    let (x, y) = (subpixel.x, subpixel.y);
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (0i64, 0i64, (1.0 - fx) * (1.0 - fy), [-(1.0 - fy), -(1.0 - fx)]),
        (1, 0, fx * (1.0 - fy), [1.0 - fy, -fx]),
        (0, 1, (1.0 - fx) * fy, [-fy, 1.0 - fx]),
        (1, 1, fx * fy, [fy, fx]),
    ];
    for (dx, dy, wgt, dw) in corners {
        let xi = x0 as i64 + dx;
        let yi = y0 as i64 + dy;
        if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
            continue;
        }
        // zero coefficients still carry a gradient
        taps.push(SplatTap {
            x: xi as usize,
            y: yi as usize,
            weight: wgt,
            d_weight: dw,
        });
    }
    taps
}

/// Running `Σw` and `Σw·payload` per target pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatAccumulator {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub weight_sum: Vec<f64>,
    pub weighted_value_sum: Vec<f64>,
}

impl SplatAccumulator {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            weight_sum: vec![0.0; width * height],
            weighted_value_sum: vec![0.0; width * height * channels],
        }
    }

    /// Scatters one element of total weight `weight` at `subpixel`.
    pub fn add(&mut self, subpixel: Vector2<f64>, weight: f64, payload: &[f64]) {
        for tap in splat_weights(subpixel, self.width, self.height) {
            self.add_tap(tap.y * self.width + tap.x, weight * tap.weight, payload);
        }
    }

    #[inline]
    fn add_tap(&mut self, target: usize, w: f64, payload: &[f64]) {
        self.weight_sum[target] += w;
        let c = self.channels;
        for (acc, &v) in self.weighted_value_sum[target * c..(target + 1) * c].iter_mut().zip(payload) {
            *acc += v * w;
        }
    }

    pub fn resolve(self, cfg: &SplatConfig) -> SplatField {
        let c = self.channels;
        let mut values = vec![0.0; self.weighted_value_sum.len()];
        let mut mask = vec![false; self.weight_sum.len()];
        for (q, &s) in self.weight_sum.iter().enumerate() {
            if s > cfg.tau {
                mask[q] = true;
                for ch in 0..c {
                    values[q * c + ch] = self.weighted_value_sum[q * c + ch] / (s + cfg.epsilon);
                }
            }
        }
        SplatField {
            width: self.width,
            height: self.height,
            channels: c,
            values,
            weight_sum: self.weight_sum,
            mask,
            z_min: None,
        }
    }
}

/// Resolved splat output.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatField {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub weight_sum: Vec<f64>,
    pub mask: Vec<bool>,
    z_min: Option<Vec<f64>>,
}

impl SplatField {
    pub fn to_image(&self) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.values.clone(),
        }
    }

    pub fn to_depth_map(&self) -> DepthMap {
        debug_assert_eq!(self.channels, 1);
        DepthMap {
            width: self.width,
            height: self.height,
            depth: self.values.clone(),
            mask: self.mask.clone(),
        }
    }
}

/// Where each element lands. `None` marks skipped (behind-camera) elements.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGeometry {
    pub positions: Vec<Option<Vector2<f64>>>,
    /// Target-view depth of every element; read by the soft z-test.
    pub depths: Vec<f64>,
    pub target_width: usize,
    pub target_height: usize,
}

#[inline]
fn z_discount(cfg: &SplatConfig, z_min: Option<&Vec<f64>>, target: usize, depth: f64) -> f64 {
    match (cfg.soft_z_sigma, z_min) {
        (Some(s), Some(zm)) => {
            let d = depth - zm[target];
            (-(d * d) / (s * s)).exp()
        }
        _ => 1.0,
    }
}

/// Splats `payload` (`channels` values per element) with optional per-element
/// weights (unit when `None`).
pub fn splat(geom: &SplatGeometry, weights: Option<&[f64]>, payload: &[f64], channels: usize, cfg: &SplatConfig) -> SplatField {
    let (w, h) = (geom.target_width, geom.target_height);
    let z_min = cfg.soft_z_sigma.map(|_| {
        let mut zm = vec![f64::INFINITY; w * h];
        for (pos, &d) in geom.positions.iter().zip(&geom.depths) {
            if let Some(pos) = pos {
                for tap in splat_weights(*pos, w, h) {
                    let t = tap.y * w + tap.x;
                    zm[t] = zm[t].min(d);
                }
            }
        }
        zm
    });
    let mut acc = SplatAccumulator::new(w, h, channels);
    for (e, pos) in geom.positions.iter().enumerate() {
        let Some(pos) = pos else { continue };
        let m = weights.map_or(1.0, |ws| ws[e]);
        let pl = &payload[e * channels..(e + 1) * channels];
        for tap in splat_weights(*pos, w, h) {
            let t = tap.y * w + tap.x;
            let k = m * tap.weight * z_discount(cfg, z_min.as_ref(), t, geom.depths[e]);
            acc.add_tap(t, k, pl);
        }
    }
    let mut field = acc.resolve(cfg);
    field.z_min = z_min;
    field
}

/// Gradients of `Σ g ⊙ field.values` with respect to element positions,
/// weights, and payloads. Masks and the soft z-test factor are held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrad {
    pub positions: Vec<Vector2<f64>>,
    pub weights: Vec<f64>,
    pub payload: Vec<f64>,
}

pub fn splat_vjp(
    geom: &SplatGeometry,
    weights: Option<&[f64]>,
    payload: &[f64],
    channels: usize,
    field: &SplatField,
    g_values: &[f64],
    cfg: &SplatConfig,
) -> SplatGrad {
    let (w, h) = (geom.target_width, geom.target_height);
    let n = geom.positions.len();
    let mut g_pos = vec![Vector2::zeros(); n];
    let mut g_w = vec![0.0; n];
    let mut g_pl = vec![0.0; n * channels];
    g_pos
        .par_iter_mut()
        .zip(g_w.par_iter_mut())
        .zip(g_pl.par_chunks_mut(channels))
        .enumerate()
        .for_each(|(e, ((gp, gw), gpl))| {
            let Some(pos) = geom.positions[e] else { return };
            let m = weights.map_or(1.0, |ws| ws[e]);
            let pl = &payload[e * channels..(e + 1) * channels];
            for tap in splat_weights(pos, w, h) {
                let t = tap.y * w + tap.x;
                if !field.mask[t] {
                    continue;
                }
                let phi = z_discount(cfg, field.z_min.as_ref(), t, geom.depths[e]);
                let denom = field.weight_sum[t] + cfg.epsilon;
                let g = &g_values[t * channels..(t + 1) * channels];
                let out = &field.values[t * channels..(t + 1) * channels];
                let mut g_k = 0.0;
                for ch in 0..channels {
                    g_k += g[ch] * (pl[ch] - out[ch]);
                }
                g_k /= denom;
                *gw += g_k * tap.weight * phi;
                gp.x += g_k * m * phi * tap.d_weight[0];
                gp.y += g_k * m * phi * tap.d_weight[1];
                let k = m * tap.weight * phi / denom;
                for ch in 0..channels {
                    gpl[ch] += g[ch] * k;
                }
            }
        });
    SplatGrad {
        positions: g_pos,
        weights: g_w,
        payload: g_pl,
    }
}

/// Every valid pixel of a depth map projected into another view, with warp
/// derivatives for gradient propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProjection {
    pub warps: Vec<Option<WarpJacobian>>,
    pub geometry: SplatGeometry,
}

pub fn project_depth_map(depth: &DepthMap, from: &CameraParams, to: &CameraParams) -> Result<DepthProjection> {
    if (depth.width, depth.height) != (from.width, from.height) {
        return Err(Error::shape(format!(
            "depth map is {}x{} but its camera is {}x{}",
            depth.width, depth.height, from.width, from.height
        )));
    }
    let w = depth.width;
    let warps: Vec<Option<WarpJacobian>> = (0..depth.depth.len())
        .into_par_iter()
        .map(|p| {
            if !depth.mask[p] {
                return None;
            }
            let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
            warp_pixel_with_jacobian(from, to, pixel, depth.depth[p]).ok()
        })
        .collect();
    let geometry = SplatGeometry {
        positions: warps.iter().map(|j| j.map(|j| j.pixel)).collect(),
        depths: warps.iter().map(|j| j.map_or(0.0, |j| j.depth)).collect(),
        target_width: to.width,
        target_height: to.height,
    };
    Ok(DepthProjection { warps, geometry })
}

impl DepthProjection {
    /// Chains position/depth gradients of the splatted elements back to the source depths.
    pub fn chain_to_depth(&self, g_positions: &[Vector2<f64>], g_depths: Option<&[f64]>) -> Vec<f64> {
        self.warps
            .iter()
            .enumerate()
            .map(|(e, j)| match j {
                Some(j) => {
                    let mut g = g_positions[e].dot(&j.d_pixel);
                    if let Some(gd) = g_depths {
                        g += gd[e] * j.d_depth;
                    }
                    g
                }
                None => 0.0,
            })
            .collect()
    }
}

/// A view rendered into another camera by texture splatting.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: ImageGrid,
    pub mask: Vec<bool>,
    pub field: SplatField,
    pub projection: DepthProjection,
}

/// Splats `image` (seen by `from` with `depth`) into `to`.
pub fn render_view(image: &ImageGrid, depth: &DepthMap, from: &CameraParams, to: &CameraParams, cfg: &SplatConfig) -> Result<RenderedView> {
    cfg.validate()?;
    if (image.width, image.height) != (depth.width, depth.height) {
        return Err(Error::shape("image and depth map sizes differ"));
    }
    let projection = project_depth_map(depth, from, to)?;
    let field = splat(&projection.geometry, None, &image.data, image.channels, cfg);
    Ok(RenderedView {
        image: field.to_image(),
        mask: field.mask.clone(),
        field,
        projection,
    })
}

/// Renders the source view from the reference image and its regressed depth.
pub fn render_source_image(
    ref_img: &ImageGrid,
    ref_depth: &DepthMap,
    reference: &CameraParams,
    source: &CameraParams,
    cfg: &SplatConfig,
) -> Result<(ImageGrid, Vec<bool>)> {
    let r = render_view(ref_img, ref_depth, reference, source, cfg)?;
    Ok((r.image, r.mask))
}

/// Renders the reference view from a source image and its synthetic depth.
pub fn render_reference_image(
    src_img: &ImageGrid,
    src_depth: &DepthMap,
    source: &CameraParams,
    reference: &CameraParams,
    cfg: &SplatConfig,
) -> Result<(ImageGrid, Vec<bool>)> {
    let r = render_view(src_img, src_depth, source, reference, cfg)?;
    Ok((r.image, r.mask))
}

/// Projected reference depth splatted into a source view (`D̃` of the depth
/// consistency term). Payload is the source-frame depth, weights are unit.
pub fn forward_project_depth(depth: &DepthMap, from: &CameraParams, to: &CameraParams, cfg: &SplatConfig) -> Result<(DepthMap, DepthProjection, SplatField)> {
    let projection = project_depth_map(depth, from, to)?;
    let field = splat(&projection.geometry, None, &projection.geometry.depths, 1, cfg);
    Ok((field.to_depth_map(), projection, field))
}

/// Fixed per-hypothesis landing positions for source-depth synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisPlan {
    pub geometry: SplatGeometry,
    pub num_hypotheses: usize,
    ref_width: usize,
    ref_height: usize,
}

impl SynthesisPlan {
    pub fn new(hyps: &DepthHypothesisGrid, reference: &CameraParams, source: &CameraParams) -> Result<Self> {
        if (hyps.width, hyps.height) != (reference.width, reference.height) {
            return Err(Error::domain(format!(
                "hypotheses are {}x{} but the reference camera is {}x{} (stage scale mismatch)",
                hyps.width, hyps.height, reference.width, reference.height
            )));
        }
        let (w, m) = (hyps.width, hyps.num_hypotheses);
        let landed: Vec<Option<(Vector2<f64>, f64)>> = (0..hyps.depths.len())
            .into_par_iter()
            .map(|e| {
                let p = e / m;
                let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
                warp_pixel(reference, source, pixel, hyps.depths[e]).ok()
            })
            .collect();
        Ok(Self {
            geometry: SplatGeometry {
                positions: landed.iter().map(|l| l.map(|l| l.0)).collect(),
                depths: landed.iter().map(|l| l.map_or(0.0, |l| l.1)).collect(),
                target_width: source.width,
                target_height: source.height,
            },
            num_hypotheses: m,
            ref_width: hyps.width,
            ref_height: hyps.height,
        })
    }

    fn check(&self, prob: &ProbabilityVolume) -> Result<()> {
        if (prob.width, prob.height, prob.num_hypotheses) != (self.ref_width, self.ref_height, self.num_hypotheses) {
            return Err(Error::domain("probability volume does not match the synthesis plan (stage scale mismatch)"));
        }
        Ok(())
    }

    /// Weighted splat of projected depths with probabilities as weights.
    pub fn synthesize_field(&self, prob: &[f64], cfg: &SplatConfig) -> SplatField {
        splat(&self.geometry, Some(prob), &self.geometry.depths, 1, cfg)
    }

    pub fn synthesize(&self, prob: &ProbabilityVolume, cfg: &SplatConfig) -> Result<(DepthMap, SplatField)> {
        self.check(prob)?;
        let field = self.synthesize_field(&prob.prob, cfg);
        Ok((field.to_depth_map(), field))
    }

    /// Gradient of `Σ_q g(q) D_s(q)` with respect to the probabilities.
    pub fn vjp(&self, prob: &[f64], field: &SplatField, g_depth: &[f64], cfg: &SplatConfig) -> Vec<f64> {
        splat_vjp(&self.geometry, Some(prob), &self.geometry.depths, 1, field, g_depth, cfg).weights
    }
}

/// Source-view depth synthesized by splatting every reference hypothesis with
/// its probability as weight.
pub fn synthesize_source_depth(
    prob: &ProbabilityVolume,
    hyps: &DepthHypothesisGrid,
    reference: &CameraParams,
    source: &CameraParams,
    cfg: &SplatConfig,
) -> Result<DepthMap> {
    cfg.validate()?;
    let plan = SynthesisPlan::new(hyps, reference, source)?;
    Ok(plan.synthesize(prob, cfg)?.0)
}

/// Blends the reference image with the mask-weighted mean of the rendered
/// references; pixels covered by no rendering keep the reference value.
pub fn smooth_reference_image(reference: &ImageGrid, rendered: &[ImageGrid], masks: &[Vec<bool>]) -> Result<ImageGrid> {
    if rendered.len() != masks.len() {
        return Err(Error::shape("rendered images and masks differ in count"));
    }
    for (r, m) in rendered.iter().zip(masks) {
        reference.ensure_same_shape(r, "rendered reference")?;
        if m.len() != reference.pixel_count() {
            return Err(Error::shape("mask size does not match the reference image"));
        }
    }
    let c = reference.channels;
    let mut out = reference.clone();
    for p in 0..reference.pixel_count() {
        let count = masks.iter().filter(|m| m[p]).count();
        if count == 0 {
            continue;
        }
        for ch in 0..c {
            let mut s = 0.0;
            for (r, m) in rendered.iter().zip(masks) {
                if m[p] {
                    s += r.data[p * c + ch];
                }
            }
            out.data[p * c + ch] = 0.5 * reference.data[p * c + ch] + 0.5 * s / count as f64;
        }
    }
    Ok(out)
}

/// Gradient of [`smooth_reference_image`] with respect to each rendered image.
pub fn smooth_reference_vjp(masks: &[Vec<bool>], channels: usize, g_out: &[f64]) -> Vec<Vec<f64>> {
    let mut g = vec![vec![0.0; g_out.len()]; masks.len()];
    for p in 0..g_out.len() / channels {
        let count = masks.iter().filter(|m| m[p]).count();
        if count == 0 {
            continue;
        }
        let k = 0.5 / count as f64;
        for (gi, m) in g.iter_mut().zip(masks) {
            if m[p] {
                for ch in 0..channels {
                    gi[p * channels + ch] = k * g_out[p * channels + ch];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::uniform_hypotheses;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn cam(t: Vector3<f64>, w: usize, h: usize) -> CameraParams {
        CameraParams::from_parts(10.0, 10.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, Matrix3::identity(), t, (1.0, 20.0), (w, h))
            .unwrap()
    }

    fn weights_of(p: [f64; 2]) -> Vec<((usize, usize), f64)> {
        splat_weights(Vector2::new(p[0], p[1]), 10, 10)
            .into_iter()
            .filter(|t| t.weight != 0.0)
            .map(|t| ((t.x, t.y), t.weight))
            .collect()
    }

    #[test]
    fn splat_weight_examples() {
        assert_eq!(weights_of([3.0, 7.0]), vec![((3, 7), 1.0)]);
        assert_eq!(
            weights_of([0.5, 0.5]),
            vec![((0, 0), 0.25), ((1, 0), 0.25), ((0, 1), 0.25), ((1, 1), 0.25)]
        );
        assert_eq!(
            weights_of([0.25, 0.75]),
            vec![((0, 0), 0.1875), ((1, 0), 0.0625), ((0, 1), 0.5625), ((1, 1), 0.1875)]
        );
        assert!(splat_weights(Vector2::new(-1.5, 2.0), 10, 10).is_empty());
        assert!(splat_weights(Vector2::new(3.0, 10.0), 10, 10).is_empty());
        let partial: f64 = splat_weights(Vector2::new(-0.25, 4.0), 10, 10).iter().map(|t| t.weight).sum();
        assert!((partial - 0.75).abs() < 1e-15);
    }

    fn one_hot(w: usize, h: usize, m: usize, j: usize) -> ProbabilityVolume {
        let mut p = vec![0.0; w * h * m];
        for px in 0..w * h {
            p[px * m + j] = 1.0;
        }
        ProbabilityVolume::from_probabilities(w, h, m, p)
    }

    #[test]
    fn identity_synthesis_recovers_hypothesis() {
        let c = cam(Vector3::zeros(), 6, 5);
        let hyps = uniform_hypotheses(2.0, 8.0, 4, 6, 5).unwrap();
        let d = synthesize_source_depth(&one_hot(6, 5, 4, 2), &hyps, &c, &c, &SplatConfig::default()).unwrap();
        assert!(d.mask.iter().all(|&m| m));
        assert!(d.depth.iter().all(|&v| (v - hyps.depths[2]).abs() < 1e-6));
    }

    #[test]
    fn single_pixel_lands_on_integer_target() {
        // baseline 1 at depth 5 with f = 10: two pixels left
        let r = cam(Vector3::zeros(), 7, 5);
        let s = cam(Vector3::new(-1.0, 0.0, 0.0), 7, 5);
        let hyps = uniform_hypotheses(5.0, 6.0, 1, 7, 5).unwrap();
        let hyps = DepthHypothesisGrid {
            depths: vec![5.0; 35],
            ..hyps
        };
        let mut p = vec![0.0; 35];
        p[2 * 7 + 4] = 1.0;
        let prob = ProbabilityVolume::from_probabilities(7, 5, 1, p);
        let cfg = SplatConfig::default();
        let d = synthesize_source_depth(&prob, &hyps, &r, &s, &cfg).unwrap();
        let q = 2 * 7 + 2;
        assert!(d.mask[q]);
        assert!((d.depth[q] - 5.0 / (1.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(d.valid_count(), 1);
        let strict = SplatConfig { tau: 2.0, ..cfg };
        let d = synthesize_source_depth(&prob, &hyps, &r, &s, &strict).unwrap();
        assert_eq!(d.valid_count(), 0);
        assert!(d.depth.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_scale_mismatch_is_rejected() {
        let c = cam(Vector3::zeros(), 6, 5);
        let hyps = uniform_hypotheses(2.0, 8.0, 4, 3, 5).unwrap();
        assert!(synthesize_source_depth(&one_hot(3, 5, 4, 0), &hyps, &c, &c, &SplatConfig::default()).is_err());
    }

    fn texture(w: usize, h: usize) -> ImageGrid {
        ImageGrid::from_fn(w, h, 2, |x, y, c| 0.5 + 0.4 * ((x * 3 + y * 5 + c * 7) as f64 * 0.37).sin())
    }

    #[test]
    fn identity_rendering_reproduces_image() {
        let c = cam(Vector3::zeros(), 8, 6);
        let img = texture(8, 6);
        let depth = DepthMap::from_fn(8, 6, |x, y| Some(3.0 + 0.1 * (x + y) as f64));
        let (r, mask) = render_source_image(&img, &depth, &c, &c, &SplatConfig::default()).unwrap();
        for p in 0..48 {
            assert!(mask[p]);
            for ch in 0..2 {
                assert!((r.data[p * 2 + ch] - img.data[p * 2 + ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_color_renders_constant() {
        let r = cam(Vector3::zeros(), 8, 6);
        let s = cam(Vector3::new(-0.37, 0.11, 0.0), 8, 6);
        let img = ImageGrid::filled(8, 6, 1, 0.3);
        let depth = DepthMap::from_fn(8, 6, |x, _| Some(4.0 + 0.2 * x as f64));
        let (out, mask) = render_source_image(&img, &depth, &r, &s, &SplatConfig::default()).unwrap();
        assert!(mask.iter().any(|&m| m));
        for (p, &m) in mask.iter().enumerate() {
            if m {
                assert!((out.data[p] - 0.3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_source_mask_renders_nothing() {
        let c = cam(Vector3::zeros(), 4, 4);
        let (_, mask) = render_reference_image(&texture(4, 4), &DepthMap::empty(4, 4), &c, &c, &SplatConfig::default()).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn smoothing_examples() {
        let i1 = ImageGrid::from_vec(2, 1, 1, vec![0.6, 0.6]).unwrap();
        let r = ImageGrid::from_vec(2, 1, 1, vec![0.2, 0.9]).unwrap();
        let out = smooth_reference_image(&i1, &[r], &[vec![true, false]]).unwrap();
        assert!((out.data[0] - 0.4).abs() < 1e-15);
        assert_eq!(out.data[1], 0.6);
        let same = smooth_reference_image(&i1, &[i1.clone(), i1.clone()], &[vec![true; 2], vec![true; 2]]).unwrap();
        assert_eq!(same, i1);
    }

    /// Literal triple loop over reference pixels, hypotheses, and the four taps.
    fn brute_force_synthesis(
        prob: &ProbabilityVolume,
        hyps: &DepthHypothesisGrid,
        r: &CameraParams,
        s: &CameraParams,
        cfg: &SplatConfig,
    ) -> DepthMap {
        let (w, h) = (s.width, s.height);
        let mut num = vec![0.0; w * h];
        let mut den = vec![0.0; w * h];
        for y in 0..hyps.height {
            for x in 0..hyps.width {
                let p = y * hyps.width + x;
                for j in 0..hyps.num_hypotheses {
                    let Ok((q, d)) = warp_pixel(r, s, Vector2::new(x as f64, y as f64), hyps.depths[p * hyps.num_hypotheses + j]) else {
                        continue;
                    };
                    let wp = prob.prob[p * hyps.num_hypotheses + j];
                    let (x0, y0) = (q.x.floor(), q.y.floor());
                    let (fx, fy) = (q.x - x0, q.y - y0);
                    for (dx, dy, b) in [
                        (0, 0, (1.0 - fx) * (1.0 - fy)),
                        (1, 0, fx * (1.0 - fy)),
                        (0, 1, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ] {
                        let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                            let t = yi as usize * w + xi as usize;
                            let k = wp * b;
                            den[t] += k;
                            num[t] += d * k;
                        }
                    }
                }
            }
        }
        DepthMap::from_fn(w, h, |x, y| {
            let t = y * w + x;
            (den[t] > cfg.tau).then(|| num[t] / (den[t] + cfg.epsilon))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_bitwise(tx in -0.8..0.8f64, ty in -0.3..0.3f64, seed in 0u64..10_000) {
            let r = cam(Vector3::zeros(), 8, 8);
            let s = cam(Vector3::new(tx, ty, 0.05), 8, 8);
            let hyps = uniform_hypotheses(3.0, 9.0, 4, 8, 8).unwrap();
            let logits: Vec<f64> = (0..256).map(|i| (((i as u64 + 1) * (seed + 7) * 2654435761 % 1000) as f64) / 300.0).collect();
            let prob = ProbabilityVolume::from_logits(8, 8, 4, logits);
            let cfg = SplatConfig::default();
            let fast = synthesize_source_depth(&prob, &hyps, &r, &s, &cfg).unwrap();
            let slow = brute_force_synthesis(&prob, &hyps, &r, &s, &cfg);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn mass_is_conserved(tx in -3.0..3.0f64, seed in 0u64..1000) {
            let r = cam(Vector3::zeros(), 8, 6);
            let s = cam(Vector3::new(tx, 0.0, 0.0), 8, 6);
            let hyps = uniform_hypotheses(2.0, 9.0, 3, 8, 6).unwrap();
            let logits: Vec<f64> = (0..144).map(|i| ((i as u64 * 7919 + seed) % 13) as f64 * 0.3).collect();
            let prob = ProbabilityVolume::from_logits(8, 6, 3, logits);
            let plan = SynthesisPlan::new(&hyps, &r, &s).unwrap();
            let field = plan.synthesize_field(&prob.prob, &SplatConfig::default());
            let total: f64 = field.weight_sum.iter().sum();
            let mut expect = 0.0;
            for (e, pos) in plan.geometry.positions.iter().enumerate() {
                if let Some(pos) = pos {
                    let frac: f64 = splat_weights(*pos, 8, 6).iter().map(|t| t.weight).sum();
                    expect += prob.prob[e] * frac;
                }
            }
            prop_assert!((total - expect).abs() < 1e-6);
        }

        #[test]
        fn identity_synthesis_equals_regression(seed in 0u64..1000) {
            let c = cam(Vector3::zeros(), 5, 4);
            let hyps = uniform_hypotheses(2.0, 9.0, 6, 5, 4).unwrap();
            let logits: Vec<f64> = (0..120).map(|i| ((i as u64 * 104729 + seed * 31) % 17) as f64 * 0.2).collect();
            let prob = ProbabilityVolume::from_logits(5, 4, 6, logits);
            let ds = synthesize_source_depth(&prob, &hyps, &c, &c, &SplatConfig::default()).unwrap();
            let dr = crate::cost_volume::regress_depth(&prob, &hyps).unwrap();
            for p in 0..20 {
                prop_assert!(ds.mask[p]);
                prop_assert!((ds.depth[p] - dr.depth[p]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synthesis_vjp_matches_finite_differences() {
        let r = cam(Vector3::zeros(), 6, 5);
        let s = cam(Vector3::new(-0.4, 0.1, 0.0), 6, 5);
        let hyps = uniform_hypotheses(2.5, 7.0, 3, 6, 5).unwrap();
        let prob: Vec<f64> = (0..90).map(|i| 0.1 + ((i * 37) % 11) as f64 / 11.0).collect();
        let plan = SynthesisPlan::new(&hyps, &r, &s).unwrap();
        let cfg = SplatConfig::default();
        let field = plan.synthesize_field(&prob, &cfg);
        let readout: Vec<f64> = (0..30)
            .map(|q| if field.mask[q] && field.weight_sum[q] > cfg.tau + 0.01 { ((q * 13) % 7) as f64 - 3.0 } else { 0.0 })
            .collect();
        let g = plan.vjp(&prob, &field, &readout, &cfg);
        let f = |p: &[f64]| -> f64 {
            let fld = plan.synthesize_field(p, &cfg);
            fld.values.iter().zip(&readout).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for e in (0..90).step_by(7) {
            let mut pp = prob.clone();
            pp[e] += h;
            let mut pm = prob.clone();
            pm[e] -= h;
            let num = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!((num - g[e]).abs() <= 1e-6 * (1.0 + num.abs()), "elem {e}: {num} vs {}", g[e]);
        }
    }

    #[test]
    fn render_vjp_matches_finite_differences() {
        let r = cam(Vector3::zeros(), 7, 6);
        let s = cam(Vector3::new(-0.3, 0.05, 0.0), 7, 6);
        let img = texture(7, 6);
        let depth = DepthMap::from_fn(7, 6, |x, y| Some(3.1 + 0.173 * x as f64 + 0.0917 * y as f64));
        let cfg = SplatConfig::default();
        let rv = render_view(&img, &depth, &r, &s, &cfg).unwrap();
        let g_out: Vec<f64> = (0..rv.image.data.len()).map(|i| ((i * 29) % 5) as f64 - 2.0).collect();
        let sg = splat_vjp(&rv.projection.geometry, None, &img.data, 2, &rv.field, &g_out, &cfg);
        let g_depth = rv.projection.chain_to_depth(&sg.positions, None);
        let f = |d: &DepthMap| -> f64 {
            let out = render_view(&img, d, &r, &s, &cfg).unwrap();
            out.image.data.iter().zip(&g_out).map(|(a, b)| a * b).sum()
        };
        let h = 1e-7;
        for p in [3usize, 10, 18, 25, 33] {
            let mut dp = depth.clone();
            dp.depth[p] += h;
            let mut dm = depth.clone();
            dm.depth[p] -= h;
            let num = (f(&dp) - f(&dm)) / (2.0 * h);
            assert!((num - g_depth[p]).abs() <= 1e-5 * (1.0 + num.abs()), "pixel {p}: {num} vs {}", g_depth[p]);
        }
    }
}
