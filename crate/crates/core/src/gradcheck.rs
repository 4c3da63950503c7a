//! Directional finite-difference checks of the analytic gradients.
//!
//! An objective reports, next to its value, a signature of every discrete
//! choice it made (masks, L1 signs, splat cells). The check is inconclusive
//! when the signature changes across the difference stencil, since the
//! objective is then not smooth between the two probe points.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::Vector2;

use crate::camera::CameraParams;
use crate::cost_volume::{regress_depth, regress_depth_vjp_logits, ProbabilityVolume};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::loss::{photometric_loss, photometric_loss_vjp, photometric_residual_signs};
use crate::refine::StageProblem;
use crate::sampling::DepthHypothesisGrid;
use crate::splat::{render_view, splat_vjp, SplatConfig, SplatGeometry, SynthesisPlan};

/// Value of an objective and the signature of its piecewise-smooth branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

pub trait Objective {
    fn dim(&self) -> usize;
    fn probe(&self, x: &[f64]) -> Result<Probe>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The stencil straddles a kink or mask change.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub status: CheckStatus,
}

/// Relative error floor, so that two vanishing derivatives compare equal.
const REL_FLOOR: f64 = 1e-12;

/// Compares `∇f(x)·dir` with `(f(x + h dir) − f(x − h dir)) / 2h`.
pub fn gradient_check<O: Objective + ?Sized>(obj: &O, x: &[f64], dir: &[f64], step: f64, tol: f64) -> Result<GradCheck> {
    if x.len() != obj.dim() || dir.len() != obj.dim() {
        return Err(Error::shape(format!(
            "gradient check needs {} entries, got x={} dir={}",
            obj.dim(),
            x.len(),
            dir.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let g = obj.gradient(x)?;
    let analytic: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    let base = obj.probe(x)?;
    let plus = obj.probe(&shifted(step))?;
    let minus = obj.probe(&shifted(-step))?;
    let numeric = (plus.value - minus.value) / (2.0 * step);
    let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    let status = if plus.signature != base.signature || minus.signature != base.signature {
        CheckStatus::Inconclusive
    } else if rel_err < tol {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(GradCheck {
        analytic,
        numeric,
        rel_err,
        status,
    })
}

fn signature_of(parts: impl FnOnce(&mut DefaultHasher)) -> u64 {
    let mut h = DefaultHasher::new();
    parts(&mut h);
    h.finish()
}

/// Integer cells of all landing positions; splat coefficients are bilinear
/// only within a cell.
fn hash_cells(h: &mut DefaultHasher, geom: &SplatGeometry) {
    for p in &geom.positions {
        p.map(|q: Vector2<f64>| (q.x.floor() as i64, q.y.floor() as i64)).hash(h);
    }
}

/// `Σ_p g(p) D(p)` with `D` regressed from softmax logits.
#[derive(Debug, Clone)]
pub struct RegressDepthObjective<'a> {
    pub hyps: &'a DepthHypothesisGrid,
    pub weights: Vec<f64>,
}

impl Objective for RegressDepthObjective<'_> {
    fn dim(&self) -> usize {
        self.hyps.depths.len()
    }

    fn probe(&self, x: &[f64]) -> Result<Probe> {
        let h = self.hyps;
        let prob = ProbabilityVolume::from_logits(h.width, h.height, h.num_hypotheses, x.to_vec());
        let d = regress_depth(&prob, h)?;
        Ok(Probe {
            value: d.depth.iter().zip(&self.weights).map(|(a, b)| a * b).sum(),
            signature: 0,
        })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.hyps;
        let prob = ProbabilityVolume::from_logits(h.width, h.height, h.num_hypotheses, x.to_vec());
        Ok(regress_depth_vjp_logits(&prob, h, &self.weights))
    }
}

/// `Σ_q g(q) D_s(q)` with `D_s` synthesized from softmax logits. Weights
/// should vanish at pixels close to the mask threshold.
#[derive(Debug, Clone)]
pub struct SynthesisObjective<'a> {
    pub plan: &'a SynthesisPlan,
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
    pub cfg: SplatConfig,
}

impl SynthesisObjective<'_> {
    fn volume(&self, x: &[f64]) -> ProbabilityVolume {
        ProbabilityVolume::from_logits(self.width, self.height, self.plan.num_hypotheses, x.to_vec())
    }
}

impl Objective for SynthesisObjective<'_> {
    fn dim(&self) -> usize {
        self.width * self.height * self.plan.num_hypotheses
    }

    fn probe(&self, x: &[f64]) -> Result<Probe> {
        let (d, _) = self.plan.synthesize(&self.volume(x), &self.cfg)?;
        Ok(Probe {
            value: d.depth.iter().zip(&self.weights).map(|(a, b)| a * b).sum(),
            signature: signature_of(|h| d.mask.hash(h)),
        })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let prob = self.volume(x);
        let field = self.plan.synthesize_field(&prob.prob, &self.cfg);
        let g_prob = self.plan.vjp(&prob.prob, &field, &self.weights, &self.cfg);
        Ok(crate::cost_volume::softmax_vjp(&prob, &g_prob))
    }
}

/// Photometric loss of the reference image rendered into a source view at
/// the depth regressed from softmax logits.
#[derive(Debug, Clone)]
pub struct PhotometricObjective<'a> {
    pub hyps: &'a DepthHypothesisGrid,
    pub reference_image: &'a ImageGrid,
    pub source_image: &'a ImageGrid,
    pub reference: &'a CameraParams,
    pub source: &'a CameraParams,
    pub cfg: SplatConfig,
}

impl PhotometricObjective<'_> {
    fn volume(&self, x: &[f64]) -> ProbabilityVolume {
        let h = self.hyps;
        ProbabilityVolume::from_logits(h.width, h.height, h.num_hypotheses, x.to_vec())
    }
}

impl Objective for PhotometricObjective<'_> {
    fn dim(&self) -> usize {
        self.hyps.depths.len()
    }

    fn probe(&self, x: &[f64]) -> Result<Probe> {
        let d = regress_depth(&self.volume(x), self.hyps)?;
        let rv = render_view(self.reference_image, &d, self.reference, self.source, &self.cfg)?;
        let loss = photometric_loss(&rv.image, self.source_image, &rv.mask)?;
        let signs = photometric_residual_signs(&rv.image, self.source_image, &rv.mask);
        Ok(Probe {
            value: loss.value,
            signature: signature_of(|h| {
                rv.mask.hash(h);
                signs.hash(h);
                hash_cells(h, &rv.projection.geometry);
            }),
        })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let prob = self.volume(x);
        let d = regress_depth(&prob, self.hyps)?;
        let rv = render_view(self.reference_image, &d, self.reference, self.source, &self.cfg)?;
        let g_img = photometric_loss_vjp(&rv.image, self.source_image, &rv.mask);
        let img = self.reference_image;
        let g = splat_vjp(&rv.projection.geometry, None, &img.data, img.channels, &rv.field, &g_img, &self.cfg);
        let g_depth = rv.projection.chain_to_depth(&g.positions, None);
        Ok(regress_depth_vjp_logits(&prob, self.hyps, &g_depth))
    }
}

/// The full stage objective with respect to its logits.
impl Objective for StageProblem<'_> {
    fn dim(&self) -> usize {
        StageProblem::dim(self)
    }

    fn probe(&self, x: &[f64]) -> Result<Probe> {
        let fwd = self.forward(&self.volume(x))?;
        let views = self.views;
        let signature = signature_of(|h| {
            fwd.ref_depth.mask.hash(h);
            for (i, (rs, rr)) in fwd.rendered_sources.iter().zip(&fwd.rendered_references).enumerate() {
                let src = &views.images[i + 1];
                rs.mask.hash(h);
                rr.mask.hash(h);
                photometric_residual_signs(&rs.image, src, &rs.mask).hash(h);
                photometric_residual_signs(&rr.image, &views.images[0], &rr.mask).hash(h);
                hash_cells(h, &rs.projection.geometry);
                hash_cells(h, &rr.projection.geometry);
                fwd.synthetic_depths[i].mask.hash(h);
            }
            depth_gradient_signs(&fwd.ref_depth).hash(h);
            crate::loss::guide_difference_signs(&fwd.smooth_reference).hash(h);
            if self.include_depth_consistency {
                for (i, ds) in fwd.synthetic_depths.iter().enumerate() {
                    if let Ok((proj, p, _)) =
                        crate::splat::forward_project_depth(&fwd.ref_depth, &views.cameras[0], &views.cameras[i + 1], &self.splat)
                    {
                        proj.mask.hash(h);
                        hash_cells(h, &p.geometry);
                        let s: Vec<bool> = proj.depth.iter().zip(&ds.depth).map(|(a, b)| a > b).collect();
                        s.hash(h);
                    }
                }
            }
        });
        Ok(Probe {
            value: self.objective(&fwd),
            signature,
        })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let prob = self.volume(x);
        let fwd = self.forward(&prob)?;
        StageProblem::gradient(self, &prob, &fwd)
    }
}

fn depth_gradient_signs(d: &crate::grid::DepthMap) -> Vec<i8> {
    let w = d.width;
    let mut out = Vec::with_capacity(2 * d.depth.len());
    for p in 0..d.depth.len() {
        let (x, y) = (p % w, p / w);
        for q in [(x + 1 < w).then(|| p + 1), (y + 1 < d.height).then(|| p + w)] {
            out.push(match q {
                Some(q) if d.mask[p] && d.mask[q] => (d.depth[q] - d.depth[p]).partial_cmp(&0.0).map_or(0, |o| o as i8),
                _ => 2,
            });
        }
    }
    out
}

/// `½ Σ s_i (x_i − c_i)²`; its gradient vanishes exactly at `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub center: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Objective for QuadraticSurrogate {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn probe(&self, x: &[f64]) -> Result<Probe> {
        let value = x
            .iter()
            .zip(&self.center)
            .zip(&self.scales)
            .map(|((a, c), s)| 0.5 * s * (a - c) * (a - c))
            .sum();
        Ok(Probe { value, signature: 0 })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().zip(&self.center).zip(&self.scales).map(|((a, c), s)| s * (a - c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::uniform_hypotheses;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn regress_depth_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hyps = uniform_hypotheses(2.0, 8.0, 8, 4, 4).unwrap();
        let obj = RegressDepthObjective {
            hyps: &hyps,
            weights: random(&mut rng, 16, 1.0),
        };
        for _ in 0..20 {
            let x = random(&mut rng, obj.dim(), 2.0);
            let dir = random(&mut rng, obj.dim(), 1.0);
            let r = gradient_check(&obj, &x, &dir, 1e-5, 1e-4).unwrap();
            assert_eq!(r.status, CheckStatus::Pass, "{r:?}");
        }
    }

    #[test]
    fn quadratic_surrogate_is_stationary_at_center() {
        let q = QuadraticSurrogate {
            center: vec![1.0, -2.0, 0.5],
            scales: vec![3.0, 1.0, 7.0],
        };
        let g = q.gradient(&q.center).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
        let r = gradient_check(&q, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 1e-4, 1e-8).unwrap();
        assert_eq!(r.status, CheckStatus::Pass);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let q = QuadraticSurrogate {
            center: vec![0.0; 3],
            scales: vec![1.0; 3],
        };
        assert!(gradient_check(&q, &[0.0; 2], &[0.0; 3], 1e-5, 1e-4).is_err());
        assert!(gradient_check(&q, &[0.0; 3], &[0.0; 3], 0.0, 1e-4).is_err());
    }
}
