//! Depth-map fusion by cross-view geometric consistency, and accuracy /
//! completeness evaluation against a reference cloud.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{backproject, project, CameraParams};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Views that must agree, counting the view that owns the pixel.
    pub min_views: usize,
    pub reproj_px: f64,
    pub rel_depth_tol: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            min_views: 2,
            reproj_px: 1.0,
            rel_depth_tol: 0.01,
        }
    }
}

/// Forward-backward check of pixel `p` of view `i` (depth `d`) against view `j`.
fn agrees(
    pixel: Vector2<f64>,
    d: f64,
    world: &Vector3<f64>,
    cam_i: &CameraParams,
    cam_j: &CameraParams,
    depth_j: &DepthMap,
    cfg: &FusionConfig,
) -> bool {
    let Ok((q, _)) = project(cam_j, world) else { return false };
    let (qx, qy) = (q.x.round(), q.y.round());
    if qx < 0.0 || qy < 0.0 || qx >= cam_j.width as f64 || qy >= cam_j.height as f64 {
        return false;
    }
    let Some(dj) = depth_j.get(qx as usize, qy as usize) else { return false };
    let Ok(y) = backproject(cam_j, Vector2::new(qx, qy), dj) else { return false };
    let Ok((back, z)) = project(cam_i, &y) else { return false };
    (back - pixel).norm() < cfg.reproj_px && ((z - d).abs() / d) < cfg.rel_depth_tol
}

/// Keeps every masked pixel whose point agrees with enough views, back-projected
/// at its own depth. Points are ordered by view, then raster order. Colors are
/// taken from `images` when given.
pub fn fuse_point_cloud(
    depth_maps: &[DepthMap],
    cams: &[CameraParams],
    cfg: &FusionConfig,
    images: Option<&[ImageGrid]>,
) -> Result<PointCloud> {
    if depth_maps.is_empty() || depth_maps.len() != cams.len() {
        return Err(Error::domain(format!(
            "fusion needs matching non-empty lists ({} depth maps, {} cameras)",
            depth_maps.len(),
            cams.len()
        )));
    }
    if cfg.min_views == 0 {
        return Err(Error::domain("min_views must be at least 1"));
    }
    for (d, c) in depth_maps.iter().zip(cams) {
        if (d.width, d.height) != (c.width, c.height) {
            return Err(Error::shape("depth map does not match its camera"));
        }
    }
    if let Some(imgs) = images {
        if imgs.len() != cams.len() {
            return Err(Error::shape("one image per view is required for colors"));
        }
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (i, (depth, cam)) in depth_maps.iter().zip(cams).enumerate() {
        let w = depth.width;
        let kept: Vec<Option<Vector3<f64>>> = (0..depth.depth.len())
            .into_par_iter()
            .map(|p| {
                if !depth.mask[p] {
                    return None;
                }
                let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
                let d = depth.depth[p];
                let x = backproject(cam, pixel, d).ok()?;
                let others = (0..cams.len())
                    .filter(|&j| j != i && agrees(pixel, d, &x, cam, &cams[j], &depth_maps[j], cfg))
                    .count();
                (1 + others >= cfg.min_views).then_some(x)
            })
            .collect();
        for (p, x) in kept.into_iter().enumerate() {
            if let Some(x) = x {
                points.push(x);
                if let Some(imgs) = images {
                    colors.push(color_of(&imgs[i], p));
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: images.map(|_| colors),
    })
}

fn color_of(img: &ImageGrid, p: usize) -> [u8; 3] {
    let c = img.channels;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let px = &img.data[p * c..(p + 1) * c];
    if c >= 3 {
        [q(px[0]), q(px[1]), q(px[2])]
    } else {
        [q(px[0]); 3]
    }
}

/// Accuracy, completeness, and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccComp {
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
}

fn mean_clamped_distance(from: &PointCloud, to: &PointCloud, max_dist: f64) -> f64 {
    let pts: Vec<[f64; 3]> = to.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, u32, 3, 32> = ImmutableKdTree::new_from_slice(&pts);
    let dists: Vec<f64> = from
        .points
        .par_iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt().min(max_dist))
        .collect();
    dists.iter().sum::<f64>() / dists.len() as f64
}

/// Mean clamped nearest-neighbor distances recon→gt (accuracy) and gt→recon (completeness).
pub fn evaluate_acc_comp(recon: &PointCloud, gt: &PointCloud, max_dist: f64) -> Result<AccComp> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::domain("accuracy/completeness needs two non-empty clouds"));
    }
    if !(max_dist > 0.0) {
        return Err(Error::domain("max_dist must be positive"));
    }
    let accuracy = mean_clamped_distance(recon, gt, max_dist);
    let completeness = mean_clamped_distance(gt, recon, max_dist);
    Ok(AccComp {
        accuracy,
        completeness,
        overall: 0.5 * (accuracy + completeness),
    })
}
