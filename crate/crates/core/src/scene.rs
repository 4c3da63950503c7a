//! Ray-cast synthetic scenes with exact per-view ground-truth depth.
//!
//! Surfaces are Lambertian with a procedural 3D value-noise albedo, so a
//! world point has the same intensity in every view. Optional per-view disc
//! darkening imitates shadows that appear in one view only.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::camera::{look_at_rotation, project, CameraParams};
use crate::error::{Error, Result};
use crate::fusion::PointCloud;
use crate::grid::{DepthMap, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// Infinite plane through the target point, optionally tilted about the y axis.
    Plane,
    /// Sphere at the target point; background rays miss.
    Sphere,
    /// Two boxes in front of a fronto-parallel back plane.
    Boxes,
}

impl std::str::FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Primitive::Plane),
            "sphere" => Ok(Primitive::Sphere),
            "boxes" => Ok(Primitive::Boxes),
            _ => Err(Error::domain(format!("unknown primitive {s:?} (plane, sphere, boxes)"))),
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Primitive::Plane => "plane",
            Primitive::Sphere => "sphere",
            Primitive::Boxes => "boxes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub primitive: Primitive,
    pub seed: u64,
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub focal: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Distance from the reference camera to the point all cameras look at.
    pub target_depth: f64,
    /// Angular step between neighboring cameras on the arc, degrees.
    pub arc_step_deg: f64,
    pub plane_tilt_deg: f64,
    pub sphere_radius: f64,
    /// Finest texture period is `texture_period / 4`, world units.
    pub texture_period: f64,
    /// Darkening factor inside each view's shadow disc; 0 disables.
    pub brightness_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            primitive: Primitive::Plane,
            seed: 0,
            num_views: 3,
            width: 128,
            height: 96,
            channels: 1,
            focal: 100.0,
            depth_min: 3.0,
            depth_max: 7.0,
            target_depth: 5.0,
            arc_step_deg: 12.0,
            plane_tilt_deg: 0.0,
            sphere_radius: 1.0,
            texture_period: 1.6,
            brightness_amplitude: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views < 2 {
            return Err(Error::domain(format!("a scene needs at least 2 views, got {}", self.num_views)));
        }
        if self.width < 2 || self.height < 2 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::domain("image must be at least 2x2 with 1 or 3 channels"));
        }
        if !(self.focal > 0.0 && self.target_depth > 0.0 && self.texture_period > 0.0 && self.sphere_radius > 0.0) {
            return Err(Error::domain("focal, target depth, texture period and sphere radius must be positive"));
        }
        if !(0.0..1.0).contains(&self.brightness_amplitude) || !(self.noise_sigma >= 0.0) {
            return Err(Error::domain("brightness amplitude must be in [0, 1) and noise sigma non-negative"));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(Error::domain("depth range must satisfy 0 < min < max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Surface {
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    Cuboid { lo: Vector3<f64>, hi: Vector3<f64> },
}

const HIT_EPS: f64 = 1e-9;

impl Surface {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Plane { point, normal } => {
                let den = d.dot(normal);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = (point - o).dot(normal) / den;
                (t > HIT_EPS).then_some(t)
            }
            Surface::Sphere { center, radius } => {
                let oc = o - center;
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPS)
            }
            Surface::Cuboid { lo, hi } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (lo[k] - o[k]) / d[k];
                    let b = (hi[k] - o[k]) / d[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > HIT_EPS)
            }
        }
    }
}

fn build_surfaces(cfg: &SceneConfig) -> Vec<Surface> {
    let target = Vector3::new(0.0, 0.0, cfg.target_depth);
    match cfg.primitive {
        Primitive::Plane => {
            let a = cfg.plane_tilt_deg.to_radians();
            vec![Surface::Plane {
                point: target,
                normal: Vector3::new(a.sin(), 0.0, -a.cos()),
            }]
        }
        Primitive::Sphere => vec![Surface::Sphere {
            center: target,
            radius: cfg.sphere_radius,
        }],
        Primitive::Boxes => {
            let z = cfg.target_depth;
            vec![
                Surface::Plane {
                    point: Vector3::new(0.0, 0.0, z + 0.6),
                    normal: Vector3::new(0.0, 0.0, -1.0),
                },
                Surface::Cuboid {
                    lo: Vector3::new(-1.0, -0.5, z - 0.6),
                    hi: Vector3::new(-0.3, 0.3, z + 0.1),
                },
                Surface::Cuboid {
                    lo: Vector3::new(0.3, -0.2, z - 0.2),
                    hi: Vector3::new(0.9, 0.7, z + 0.4),
                },
            ]
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64) ^ splitmix((y as u64) ^ splitmix(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with quintic fade, in [0, 1].
fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let fl = p.map(f64::floor);
    let f = p - fl;
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v, w) = (fade(f.x), fade(f.y), fade(f.z));
    let (ix, iy, iz) = (fl.x as i64, fl.y as i64, fl.z as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - w), (1, w)] {
        for (dy, wy) in [(0, 1.0 - v), (1, v)] {
            for (dx, wx) in [(0, 1.0 - u), (1, u)] {
                acc += wx * wy * wz * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

/// Procedural albedo: three octaves of value noise, contrast stretched into [0.1, 0.9].
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    seed: u64,
    period: f64,
    channels: usize,
}

impl Texture {
    pub fn new(seed: u64, period: f64, channels: usize) -> Self {
        Self { seed, period, channels }
    }

    pub fn albedo(&self, p: &Vector3<f64>, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let s = splitmix(self.seed.wrapping_mul(3).wrapping_add(c as u64 + 1));
            let mut n = 0.0;
            let mut amp = 1.0;
            let mut period = self.period;
            let mut norm = 0.0;
            for octave in 0..3u64 {
                n += amp * value_noise(s ^ splitmix(octave), &(p / period));
                norm += amp;
                amp *= 0.5;
                period *= 0.5;
            }
            let n = n / norm;
            *o = (0.5 + 2.0 * (n - 0.5)).clamp(0.1, 0.9);
        }
    }
}

/// One rendered view with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub image: ImageGrid,
    /// Noise-free, unperturbed image.
    pub clean_image: ImageGrid,
    pub depth: DepthMap,
    pub camera: CameraParams,
    /// Per-pixel brightness multiplier (1 outside the shadow disc).
    pub brightness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub views: Vec<SceneView>,
    pub texture: Texture,
    surfaces: Vec<Surface>,
}

impl Scene {
    /// Nearest hit of a world ray: `(t, point)`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(origin, dir))
            .min_by(|a, b| a.total_cmp(b))
            .map(|t| (t, origin + dir * t))
    }

    /// Camera-frame depth of the first surface seen through a continuous pixel.
    pub fn ray_cast_depth(&self, cam: &CameraParams, pixel: Vector2<f64>) -> Option<f64> {
        let (o, d) = cam.world_ray(pixel);
        self.cast(&o, &d).map(|(_, p)| cam.world_to_camera(&p).z)
    }

    /// Whether a world point is in bounds and unoccluded in a camera.
    pub fn visible(&self, cam: &CameraParams, point: &Vector3<f64>) -> bool {
        let Ok((px, z)) = project(cam, point) else { return false };
        if !cam.in_bounds(&px) {
            return false;
        }
        match self.ray_cast_depth(cam, px) {
            Some(hit) => (hit - z).abs() <= 1e-6 * z,
            None => false,
        }
    }

    /// Ray-cast image (albedo only) and GT depth for an arbitrary camera.
    pub fn render(&self, cam: &CameraParams) -> (ImageGrid, DepthMap) {
        let (w, h, c) = (cam.width, cam.height, self.config.channels);
        let hits: Vec<Option<(f64, Vector3<f64>)>> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                let (o, d) = cam.world_ray(Vector2::new((p % w) as f64, (p / w) as f64));
                self.cast(&o, &d).map(|(_, pt)| (cam.world_to_camera(&pt).z, pt))
            })
            .collect();
        let mut image = ImageGrid::new(w, h, c);
        let mut depth = DepthMap::empty(w, h);
        for (p, hit) in hits.iter().enumerate() {
            if let Some((z, pt)) = hit {
                self.texture.albedo(pt, &mut image.data[p * c..(p + 1) * c]);
                if *z >= cam.depth_min && *z <= cam.depth_max {
                    depth.depth[p] = *z;
                    depth.mask[p] = true;
                }
            }
        }
        (image, depth)
    }

    /// Pixels of `from` whose GT surface point is also visible in `to`.
    pub fn covisible_mask(&self, from: usize, to: usize) -> Vec<bool> {
        let a = &self.views[from];
        let cam_to = &self.views[to].camera;
        let w = a.camera.width;
        (0..a.depth.depth.len())
            .into_par_iter()
            .map(|p| {
                if !a.depth.mask[p] {
                    return false;
                }
                let pixel = Vector2::new((p % w) as f64, (p / w) as f64);
                match crate::camera::backproject(&a.camera, pixel, a.depth.depth[p]) {
                    Ok(x) => self.visible(cam_to, &x),
                    Err(_) => false,
                }
            })
            .collect()
    }

    /// Surface points hit by `supersample²` rays per pixel of every view, kept
    /// when visible in at least `min_views` views. Ordered by view, then ray.
    pub fn gt_point_cloud(&self, supersample: usize, min_views: usize) -> PointCloud {
        let s = supersample.max(1);
        let mut points = Vec::new();
        for v in &self.views {
            let cam = &v.camera;
            let (w, h) = (cam.width * s, cam.height * s);
            let step = 1.0 / s as f64;
            let off = 0.5 * step - 0.5;
            let hits: Vec<Option<Vector3<f64>>> = (0..w * h)
                .into_par_iter()
                .map(|i| {
                    let px = Vector2::new(off + (i % w) as f64 * step, off + (i / w) as f64 * step);
                    if !cam.in_bounds(&px) {
                        return None;
                    }
                    let (o, d) = cam.world_ray(px);
                    let (_, pt) = self.cast(&o, &d)?;
                    let z = cam.world_to_camera(&pt).z;
                    if z < cam.depth_min || z > cam.depth_max {
                        return None;
                    }
                    let n = self.views.iter().filter(|u| self.visible(&u.camera, &pt)).count();
                    (n >= min_views).then_some(pt)
                })
                .collect();
            points.extend(hits.into_iter().flatten());
        }
        PointCloud { points, colors: None }
    }
}

fn arc_angle(k: usize, step: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let ring = k.div_ceil(2) as f64;
    if k % 2 == 1 {
        ring * step
    } else {
        -ring * step
    }
}

/// Cameras on a horizontal arc around the target. View 0 sits at the origin
/// with identity extrinsics; the rest alternate `+Δ, −Δ, +2Δ, …`.
pub fn arc_cameras(cfg: &SceneConfig) -> Result<Vec<CameraParams>> {
    let target = Vector3::new(0.0, 0.0, cfg.target_depth);
    let (cx, cy) = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    (0..cfg.num_views)
        .map(|k| {
            let a = arc_angle(k, cfg.arc_step_deg.to_radians());
            let center = target + cfg.target_depth * Vector3::new(a.sin(), 0.0, -a.cos());
            let r = if k == 0 {
                nalgebra::Matrix3::identity()
            } else {
                look_at_rotation(&center, &target, &Vector3::new(0.0, 1.0, 0.0))
            };
            let t = -(r * center);
            CameraParams::from_parts(cfg.focal, cfg.focal, cx, cy, r, t, (cfg.depth_min, cfg.depth_max), (cfg.width, cfg.height))
        })
        .collect()
}

fn shadow_disc(cfg: &SceneConfig, view: usize) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    if cfg.brightness_amplitude == 0.0 {
        return vec![1.0; w * h];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5ad0_u64.wrapping_mul(view as u64 + 1)));
    let cx = rng.random_range(0.25..0.75) * w as f64;
    let cy = rng.random_range(0.25..0.75) * h as f64;
    let r = rng.random_range(0.12..0.22) * w.min(h) as f64;
    let dim = 1.0 - cfg.brightness_amplitude;
    (0..w * h)
        .map(|p| {
            let (dx, dy) = ((p % w) as f64 - cx, (p / w) as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                dim
            } else {
                1.0
            }
        })
        .collect()
}

/// Renders every view of a seeded scene.
pub fn generate_synthetic_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let cams = arc_cameras(cfg)?;
    let mut scene = Scene {
        config: cfg.clone(),
        views: Vec::with_capacity(cams.len()),
        texture: Texture::new(cfg.seed, cfg.texture_period, cfg.channels),
        surfaces: build_surfaces(cfg),
    };
    for (k, cam) in cams.into_iter().enumerate() {
        let (clean, depth) = scene.render(&cam);
        let brightness = shadow_disc(cfg, k);
        let mut image = clean.clone();
        let c = cfg.channels;
        for (p, &b) in brightness.iter().enumerate() {
            for v in &mut image.data[p * c..(p + 1) * c] {
                *v *= b;
            }
        }
        if cfg.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x0015e_u64.wrapping_mul(k as u64 + 1)));
            let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::domain(e.to_string()))?;
            for v in &mut image.data {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        scene.views.push(SceneView {
            image,
            clean_image: clean,
            depth,
            camera: cam,
            brightness,
        });
    }
    if scene.views.iter().all(|v| v.depth.valid_count() == 0) {
        return Err(Error::Scene("no camera sees the primitive inside its depth range".into()));
    }
    Ok(scene)
}
