//! Per-pixel depth hypotheses: uniform, adaptive bins, and entropy-adaptive
//! Gaussian sampling.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::cost_volume::ProbabilityVolume;
use crate::error::{Error, Result};
use crate::grid::DepthMap;

const WIDTH_SUM_TOL: f64 = 1e-6;

/// Candidate depths for every pixel of one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypothesisGrid {
    pub width: usize,
    pub height: usize,
    pub num_hypotheses: usize,
    pub stage: usize,
    /// `(y * width + x) * M + j`, strictly increasing in `j`.
    pub depths: Vec<f64>,
    pub range_lo: Vec<f64>,
    pub range_hi: Vec<f64>,
    /// Normalized bin widths, laid out like `depths`, for bin-based samplers.
    pub widths: Option<Vec<f64>>,
    /// Pixels whose prior depth was usable. `None` for samplers without a prior.
    pub prior_valid: Option<Vec<bool>>,
}

impl DepthHypothesisGrid {
    #[inline]
    pub fn pixel_depths(&self, pixel: usize) -> &[f64] {
        let m = self.num_hypotheses;
        &self.depths[pixel * m..(pixel + 1) * m]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Mean hypothesis spacing, averaged over pixels.
    pub fn mean_spacing(&self) -> f64 {
        let m = self.num_hypotheses;
        let total: f64 = (0..self.pixel_count())
            .map(|p| (self.range_hi[p] - self.range_lo[p]) / m as f64)
            .sum();
        total / self.pixel_count() as f64
    }

    /// Checks ordering, range containment, and width normalization.
    pub fn validate(&self) -> Result<()> {
        for p in 0..self.pixel_count() {
            let d = self.pixel_depths(p);
            if d.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::domain(format!("hypotheses not strictly increasing at pixel {p}")));
            }
            if d.iter().any(|&v| v < self.range_lo[p] || v > self.range_hi[p]) {
                return Err(Error::domain(format!("hypothesis outside range at pixel {p}")));
            }
            if let Some(w) = &self.widths {
                let w = &w[p * self.num_hypotheses..(p + 1) * self.num_hypotheses];
                if w.iter().any(|&b| !(b > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > WIDTH_SUM_TOL {
                    return Err(Error::domain(format!("bin widths not normalized at pixel {p}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-pixel normalized bin widths, `H × W × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinWidths {
    pub width: usize,
    pub height: usize,
    pub num_bins: usize,
    pub values: Vec<f64>,
}

/// Per-pixel Shannon entropy of a probability volume, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub width: usize,
    pub height: usize,
    pub entropy: Vec<f64>,
}

impl UncertaintyMap {
    pub fn upsample_nearest(&self, factor: usize) -> UncertaintyMap {
        UncertaintyMap {
            width: self.width * factor,
            height: self.height * factor,
            entropy: crate::grid::upsample_nearest_scalar(&self.entropy, self.width, self.height, factor),
        }
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::domain(format!("depth range must satisfy 0 < lo < hi, got [{lo}, {hi}]")));
    }
    Ok(())
}

/// Evenly spaced values in `[lo, hi]`, endpoints included; the midpoint when `m == 1`.
fn linspace_into(lo: f64, hi: f64, m: usize, out: &mut [f64]) {
    if m == 1 {
        out[0] = 0.5 * (lo + hi);
        return;
    }
    let step = (hi - lo) / (m - 1) as f64;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == m - 1 { hi } else { lo + step * j as f64 };
    }
}

/// The same endpoint-inclusive linspace at every pixel.
pub fn uniform_hypotheses(lo: f64, hi: f64, m: usize, width: usize, height: usize) -> Result<DepthHypothesisGrid> {
    check_range(lo, hi)?;
    if m == 0 {
        return Err(Error::domain("number of hypotheses must be at least 1"));
    }
    let mut row = vec![0.0; m];
    linspace_into(lo, hi, m, &mut row);
    let n = width * height;
    let mut depths = Vec::with_capacity(n * m);
    for _ in 0..n {
        depths.extend_from_slice(&row);
    }
    Ok(DepthHypothesisGrid {
        width,
        height,
        num_hypotheses: m,
        stage: 1,
        depths,
        range_lo: vec![lo; n],
        range_hi: vec![hi; n],
        widths: None,
        prior_valid: None,
    })
}

/// Bin centers of one pixel: `d_j = lo + (hi - lo)(b_j/2 + Σ_{i<j} b_i)`.
#[inline]
fn bin_centers_into(widths: &[f64], lo: f64, hi: f64, out: &mut [f64]) {
    let span = hi - lo;
    let mut before = 0.0;
    for (o, &b) in out.iter_mut().zip(widths) {
        *o = lo + span * (0.5 * b + before);
        before += b;
    }
}

fn check_widths(widths: &[f64], pixel: usize) -> Result<()> {
    if widths.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::domain(format!("non-positive bin width at pixel {pixel}")));
    }
    let sum: f64 = widths.iter().sum();
    if (sum - 1.0).abs() > WIDTH_SUM_TOL {
        return Err(Error::domain(format!("bin widths at pixel {pixel} sum to {sum}")));
    }
    Ok(())
}

/// Adaptive-bins sampling over a global `[lo, hi]` with per-pixel widths.
pub fn adaptive_bins_hypotheses(widths: &BinWidths, lo: f64, hi: f64) -> Result<DepthHypothesisGrid> {
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::domain(format!("invalid depth range [{lo}, {hi}]")));
    }
    let n = widths.width * widths.height;
    adaptive_bins_per_pixel(widths, &vec![lo; n], &vec![hi; n])
}

fn adaptive_bins_per_pixel(widths: &BinWidths, lo: &[f64], hi: &[f64]) -> Result<DepthHypothesisGrid> {
    let m = widths.num_bins;
    let n = widths.width * widths.height;
    if m == 0 || widths.values.len() != n * m {
        return Err(Error::shape(format!(
            "bin widths need {}x{}x{m} values, got {}",
            widths.width,
            widths.height,
            widths.values.len()
        )));
    }
    let mut depths = vec![0.0; n * m];
    for p in 0..n {
        let w = &widths.values[p * m..(p + 1) * m];
        check_widths(w, p)?;
        bin_centers_into(w, lo[p], hi[p], &mut depths[p * m..(p + 1) * m]);
    }
    Ok(DepthHypothesisGrid {
        width: widths.width,
        height: widths.height,
        num_hypotheses: m,
        stage: 1,
        depths,
        range_lo: lo.to_vec(),
        range_hi: hi.to_vec(),
        widths: Some(widths.values.clone()),
        prior_valid: None,
    })
}

/// Default coarse-stage width provider: per pixel, softmax over bins of
/// `v · c_j`, where `v` is the 3×3 local variance of `luminance` and `c_j` a
/// tent peaking at the central bins. Flat regions get uniform bins.
pub fn variance_bin_widths(luminance: &[f64], width: usize, height: usize, m: usize) -> BinWidths {
    let mut values = Vec::with_capacity(width * height * m);
    let tent: Vec<f64> = (0..m)
        .map(|j| {
            if m == 1 {
                1.0
            } else {
                1.0 - (2.0 * j as f64 / (m - 1) as f64 - 1.0).abs()
            }
        })
        .collect();
    let mut logits = vec![0.0; m];
    for y in 0..height {
        for x in 0..width {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    let v = luminance[yy * width + xx];
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            for (l, &c) in logits.iter_mut().zip(&tent) {
                *l = var * c;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            values.extend(logits.iter().map(|l| (l - mx).exp() / z));
        }
    }
    BinWidths {
        width,
        height,
        num_bins: m,
        values,
    }
}

/// `E(p) = -Σ_j P(p,j) ln P(p,j)` with `0 ln 0 = 0`.
pub fn entropy_map(prob: &ProbabilityVolume) -> UncertaintyMap {
    let m = prob.num_hypotheses;
    let cap = (m as f64).ln();
    let entropy = prob
        .prob
        .chunks_exact(m)
        .map(|ps| {
            let e: f64 = ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            e.clamp(0.0, cap)
        })
        .collect();
    UncertaintyMap {
        width: prob.width,
        height: prob.height,
        entropy,
    }
}

/// Bin widths from inverse-CDF sampling of a standard normal truncated to
/// `[-a, a]`: `M + 1` quantiles evenly spaced in CDF space, differenced and
/// normalized by `2a`. Exactly symmetric.
pub fn gaussian_bin_widths(a: f64, m: usize) -> Vec<f64> {
    assert!(a > 0.0 && m >= 1);
    let normal = Normal::standard();
    let lower = normal.cdf(-a);
    let mass = 1.0 - 2.0 * lower;
    let mut t = vec![0.0; m + 1];
    t[0] = -a;
    t[m] = a;
    for k in 1..=m / 2 {
        let v = if 2 * k == m {
            0.0
        } else {
            normal.inverse_cdf(lower + mass * k as f64 / m as f64)
        };
        t[k] = v;
        t[m - k] = -v;
    }
    t.windows(2).map(|w| (w[1] - w[0]) / (2.0 * a)).collect()
}

/// Fine-stage sampling around a previous depth estimate.
///
/// The window `[prev - R/2, prev + R/2]` is clipped to the global range and
/// filled with Gaussian bins of half-width `1 + E(p)`. Pixels without a prior
/// get uniform hypotheses over a window centered on the global range.
pub fn adaptive_gaussian_hypotheses(
    prev_depth: &DepthMap,
    uncertainty: &UncertaintyMap,
    stage_range: f64,
    m: usize,
    global_lo: f64,
    global_hi: f64,
) -> Result<DepthHypothesisGrid> {
    check_range(global_lo, global_hi)?;
    if !(stage_range > 0.0) || m == 0 {
        return Err(Error::domain("stage range must be positive and M at least 1"));
    }
    if (prev_depth.width, prev_depth.height) != (uncertainty.width, uncertainty.height) {
        return Err(Error::shape("previous depth and entropy map sizes differ"));
    }
    let (w, h) = (prev_depth.width, prev_depth.height);
    let n = w * h;
    let half = 0.5 * stage_range;
    let mut depths = vec![0.0; n * m];
    let mut widths = vec![0.0; n * m];
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut prior_valid = vec![false; n];
    let mut cache: Option<(u64, Vec<f64>)> = None;
    for p in 0..n {
        let out = &mut depths[p * m..(p + 1) * m];
        let bw = &mut widths[p * m..(p + 1) * m];
        match prev_depth.mask[p].then(|| prev_depth.depth[p]) {
            Some(center) => {
                let a = 1.0 + uncertainty.entropy[p];
                let key = a.to_bits();
                let b = match &cache {
                    Some((k, b)) if *k == key => b,
                    _ => &cache.insert((key, gaussian_bin_widths(a, m))).1,
                };
                lo[p] = (center - half).max(global_lo);
                hi[p] = (center + half).min(global_hi);
                bw.copy_from_slice(b);
                bin_centers_into(b, lo[p], hi[p], out);
                prior_valid[p] = true;
            }
            None => {
                let center = 0.5 * (global_lo + global_hi);
                lo[p] = (center - half).max(global_lo);
                hi[p] = (center + half).min(global_hi);
                linspace_into(lo[p], hi[p], m, out);
                bw.iter_mut().for_each(|v| *v = 1.0 / m as f64);
            }
        }
    }
    Ok(DepthHypothesisGrid {
        width: w,
        height: h,
        num_hypotheses: m,
        stage: 2,
        depths,
        range_lo: lo,
        range_hi: hi,
        widths: Some(widths),
        prior_valid: Some(prior_valid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Φ by composite Simpson quadrature of the density from 0, independent of statrs.
    fn phi_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    fn phi_inverse_bisect(q: f64) -> f64 {
        let (mut a, mut b) = (-10.0, 10.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if phi_quadrature(m) < q {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    fn widths_oracle(a: f64, m: usize) -> Vec<f64> {
        let lo = phi_quadrature(-a);
        let hi = phi_quadrature(a);
        let t: Vec<f64> = (0..=m)
            .map(|k| phi_inverse_bisect(lo + (hi - lo) * k as f64 / m as f64))
            .collect();
        t.windows(2).map(|w| (w[1] - w[0]) / (t[m] - t[0])).collect()
    }

    fn one_map(depth: f64) -> (DepthMap, UncertaintyMap) {
        (
            DepthMap::constant(1, 1, depth),
            UncertaintyMap {
                width: 1,
                height: 1,
                entropy: vec![0.0],
            },
        )
    }

    #[test]
    fn uniform_examples() {
        let g = uniform_hypotheses(2.0, 8.0, 3, 2, 2).unwrap();
        for p in 0..4 {
            assert_eq!(g.pixel_depths(p), &[2.0, 5.0, 8.0]);
        }
        let g = uniform_hypotheses(2.0, 8.0, 1, 1, 1).unwrap();
        assert_eq!(g.pixel_depths(0), &[5.0]);
        let g = uniform_hypotheses(425.0, 935.0, 48, 1, 1).unwrap();
        let d = g.pixel_depths(0);
        assert_eq!(d[0], 425.0);
        assert_eq!(d[47], 935.0);
        assert!((d[1] - d[0] - 510.0 / 47.0).abs() < 1e-9);
        assert!(uniform_hypotheses(8.0, 2.0, 3, 1, 1).is_err());
        assert!(uniform_hypotheses(2.0, 8.0, 0, 1, 1).is_err());
        g.validate().unwrap();
    }

    #[test]
    fn adaptive_bins_examples() {
        let run = |w: Vec<f64>, lo, hi| {
            let bw = BinWidths {
                width: 1,
                height: 1,
                num_bins: w.len(),
                values: w,
            };
            adaptive_bins_hypotheses(&bw, lo, hi).unwrap().depths
        };
        assert_eq!(run(vec![0.5, 0.5], 0.0, 1.0), vec![0.25, 0.75]);
        assert_eq!(run(vec![1.0], 0.0, 10.0), vec![5.0]);
        let d = run(vec![0.1, 0.2, 0.3, 0.4], 0.0, 10.0);
        for (a, b) in d.iter().zip([0.5, 2.0, 4.5, 8.0]) {
            assert!((a - b).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn adaptive_bins_rejects_bad_widths() {
        let bw = |v: Vec<f64>| BinWidths {
            width: 1,
            height: 1,
            num_bins: v.len(),
            values: v,
        };
        assert!(adaptive_bins_hypotheses(&bw(vec![0.5, 0.6]), 0.0, 1.0).is_err());
        assert!(adaptive_bins_hypotheses(&bw(vec![1.5, -0.5]), 0.0, 1.0).is_err());
        assert!(adaptive_bins_hypotheses(&bw(vec![1.0, 0.0]), 0.0, 1.0).is_err());
    }

    #[test]
    fn uniform_widths_reproduce_midpoint_sampling() {
        let m = 7;
        let bw = BinWidths {
            width: 1,
            height: 1,
            num_bins: m,
            values: vec![1.0 / m as f64; m],
        };
        let g = adaptive_bins_hypotheses(&bw, 3.0, 10.0).unwrap();
        for (j, d) in g.depths.iter().enumerate() {
            let expect = 3.0 + 7.0 * (2.0 * (j + 1) as f64 - 1.0) / (2.0 * m as f64);
            assert!((d - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        let pv = |m: usize, p: Vec<f64>| ProbabilityVolume::from_probabilities(1, 1, m, p);
        let mut onehot = vec![0.0; 48];
        onehot[5] = 1.0;
        assert_eq!(entropy_map(&pv(48, onehot)).entropy[0], 0.0);
        let e = entropy_map(&pv(48, vec![1.0 / 48.0; 48])).entropy[0];
        assert!((e - 48f64.ln()).abs() < 1e-12);
        assert!((e - 3.8712).abs() < 1e-4);
        let mut two = vec![0.0; 48];
        two[0] = 0.5;
        two[1] = 0.5;
        assert!((entropy_map(&pv(48, two)).entropy[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_widths_match_quadrature_oracle() {
        // frozen from phi_quadrature/phi_inverse_bisect
        let w = gaussian_bin_widths(1.0, 4);
        let frozen = [0.279_114_73, 0.220_885_27, 0.220_885_27, 0.279_114_73];
        for (a, b) in w.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-8, "{w:?}");
        }
        for (a, m) in [(1.0, 4), (2.3, 7), (4.5, 8)] {
            let got = gaussian_bin_widths(a, m);
            let oracle = widths_oracle(a, m);
            for (g, o) in got.iter().zip(&oracle) {
                assert!((g - o).abs() < 1e-7, "a={a} m={m}: {got:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn gaussian_two_bin_example() {
        let (d, e) = one_map(10.0);
        let g = adaptive_gaussian_hypotheses(&d, &e, 4.0, 2, 1.0, 100.0).unwrap();
        assert_eq!(g.widths.as_ref().unwrap(), &vec![0.5, 0.5]);
        assert_eq!(g.depths, vec![9.0, 11.0]);
    }

    #[test]
    fn gaussian_window_is_clipped_and_fallback_is_uniform() {
        let (d, e) = one_map(2.0);
        let g = adaptive_gaussian_hypotheses(&d, &e, 4.0, 4, 1.5, 100.0).unwrap();
        assert_eq!(g.range_lo[0], 1.5);
        assert_eq!(g.range_hi[0], 4.0);
        g.validate().unwrap();
        let empty = DepthMap::empty(1, 1);
        let g = adaptive_gaussian_hypotheses(&empty, &e, 2.0, 3, 4.0, 8.0).unwrap();
        assert_eq!(g.depths, vec![5.0, 6.0, 7.0]);
        assert_eq!(g.prior_valid, Some(vec![false]));
    }

    proptest! {
        #[test]
        fn gaussian_hypotheses_symmetric_and_center_dense(
            entropy in 0.0..4.0f64, m in 2usize..64, center in 20.0..30.0f64, range in 0.1..5.0f64,
        ) {
            let d = DepthMap::constant(1, 1, center);
            let e = UncertaintyMap { width: 1, height: 1, entropy: vec![entropy] };
            let g = adaptive_gaussian_hypotheses(&d, &e, range, m, 1.0, 100.0).unwrap();
            g.validate().unwrap();
            let dep = g.pixel_depths(0);
            for j in 0..m {
                prop_assert!(((dep[j] - center) + (dep[m - 1 - j] - center)).abs() < 1e-9);
            }
            let w = g.widths.unwrap();
            // non-increasing toward the center
            for j in 0..(m - 1) / 2 {
                prop_assert!(w[j] >= w[j + 1] - 1e-15);
            }
            let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!((w[m / 2] - min).abs() < 1e-15);
        }

        #[test]
        fn more_entropy_widens_outer_bins(e1 in 0.0..3.0f64, de in 0.05..1.0f64, m in 3usize..48) {
            let ratio = |a: f64| {
                let w = gaussian_bin_widths(a, m);
                w[0] / w[m / 2]
            };
            prop_assert!(ratio(1.0 + e1 + de) > ratio(1.0 + e1));
        }

        #[test]
        fn samplers_are_deterministic(seed in 0u64..1000) {
            let n = 6;
            let lum: Vec<f64> = (0..n * n).map(|i| (((i as u64 * 2654435761 + seed) % 97) as f64) / 97.0).collect();
            let a = variance_bin_widths(&lum, n, n, 9);
            let b = variance_bin_widths(&lum, n, n, 9);
            prop_assert_eq!(&a, &b);
            let ga = adaptive_bins_hypotheses(&a, 2.0, 9.0).unwrap();
            ga.validate().unwrap();
            prop_assert_eq!(ga, adaptive_bins_hypotheses(&b, 2.0, 9.0).unwrap());
        }
    }
}
