//! Pinhole cameras and reference-to-source pixel warping.
//!
//! Warping a pixel at a depth hypothesis is back-projection through the
//! reference camera followed by projection through the source camera, i.e. the
//! fronto-parallel plane-sweep homography evaluated one pixel at a time.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points whose camera-frame depth is at or below this are behind the camera.
pub const MIN_CAMERA_DEPTH: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;

/// Intrinsics, world-to-camera extrinsics, and the valid depth range of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraParams {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        depth_min: f64,
        depth_max: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = &intrinsics;
        let lower_ok = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_ok || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(Error::domain(
                "intrinsics must be upper-triangular with positive focal lengths and K[2][2] = 1",
            ));
        }
        if extrinsics.row(3) != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(Error::domain("extrinsics bottom row must be [0 0 0 1]"));
        }
        let r: Matrix3<f64> = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho < ROTATION_TOL) || !((r.determinant() - 1.0).abs() < ROTATION_TOL) {
            return Err(Error::domain(format!(
                "extrinsic rotation is not orthonormal (|RtR - I| = {ortho:e}, det = {})",
                r.determinant()
            )));
        }
        if !(depth_min > 0.0 && depth_min < depth_max) {
            return Err(Error::domain(format!(
                "depth range must satisfy 0 < min < max, got [{depth_min}, {depth_max}]"
            )));
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            depth_min,
            depth_max,
            width,
            height,
        })
    }

    /// Convenience constructor from focal lengths, principal point, rotation and translation.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        depth_range: (f64, f64),
        size: (usize, usize),
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(k, t, depth_range.0, depth_range.1, size.0, size.1)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn depth_range(&self) -> f64 {
        self.depth_max - self.depth_min
    }

    /// Camera for an image area-averaged by `factor`. Fine pixel center
    /// `f·x' + (f-1)/2` maps to coarse pixel `x'`.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::domain(format!(
                "{}x{} camera is not divisible by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let f = factor as f64;
        let off = (f - 1.0) / 2.0;
        let mut k = self.intrinsics;
        k[(0, 0)] /= f;
        k[(0, 1)] /= f;
        k[(1, 1)] /= f;
        k[(0, 2)] = (k[(0, 2)] - off) / f;
        k[(1, 2)] = (k[(1, 2)] - off) / f;
        Ok(Self {
            intrinsics: k,
            extrinsics: self.extrinsics,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            width: self.width / factor,
            height: self.height / factor,
        })
    }

    /// Normalized ray direction `K⁻¹ [x, y, 1]` in the camera frame (z = 1).
    #[inline]
    pub fn pixel_ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        let yn = (pixel.y - k[(1, 2)]) / k[(1, 1)];
        let xn = (pixel.x - k[(0, 2)] - k[(0, 1)] * yn) / k[(0, 0)];
        Vector3::new(xn, yn, 1.0)
    }

    /// Camera-frame to pixel coordinates for a point with positive z.
    #[inline]
    fn camera_to_pixel(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        let xn = p.x / p.z;
        let yn = p.y / p.z;
        Vector2::new(k[(0, 0)] * xn + k[(0, 1)] * yn + k[(0, 2)], k[(1, 1)] * yn + k[(1, 2)])
    }

    #[inline]
    pub fn world_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        let e = &self.extrinsics;
        Vector3::new(
            e[(0, 0)] * world.x + e[(0, 1)] * world.y + e[(0, 2)] * world.z + e[(0, 3)],
            e[(1, 0)] * world.x + e[(1, 1)] * world.y + e[(1, 2)] * world.z + e[(1, 3)],
            e[(2, 0)] * world.x + e[(2, 1)] * world.y + e[(2, 2)] * world.z + e[(2, 3)],
        )
    }

    #[inline]
    fn camera_to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        let e = &self.extrinsics;
        let d = Vector3::new(cam.x - e[(0, 3)], cam.y - e[(1, 3)], cam.z - e[(2, 3)]);
        // Rᵀ d
        Vector3::new(
            e[(0, 0)] * d.x + e[(1, 0)] * d.y + e[(2, 0)] * d.z,
            e[(0, 1)] * d.x + e[(1, 1)] * d.y + e[(2, 1)] * d.z,
            e[(0, 2)] * d.x + e[(1, 2)] * d.y + e[(2, 2)] * d.z,
        )
    }

    #[inline]
    fn rotate_to_world(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let e = &self.extrinsics;
        Vector3::new(
            e[(0, 0)] * dir.x + e[(1, 0)] * dir.y + e[(2, 0)] * dir.z,
            e[(0, 1)] * dir.x + e[(1, 1)] * dir.y + e[(2, 1)] * dir.z,
            e[(0, 2)] * dir.x + e[(1, 2)] * dir.y + e[(2, 2)] * dir.z,
        )
    }

    #[inline]
    fn rotate_to_camera(&self, dir: &Vector3<f64>) -> Vector3<f64> {
        let e = &self.extrinsics;
        Vector3::new(
            e[(0, 0)] * dir.x + e[(0, 1)] * dir.y + e[(0, 2)] * dir.z,
            e[(1, 0)] * dir.x + e[(1, 1)] * dir.y + e[(1, 2)] * dir.z,
            e[(2, 0)] * dir.x + e[(2, 1)] * dir.y + e[(2, 2)] * dir.z,
        )
    }

    #[inline]
    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width as f64 - 1.0)
            && pixel.y <= (self.height as f64 - 1.0)
    }

    /// World-space ray (origin, unit direction) through a pixel center.
    pub fn world_ray(&self, pixel: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let dir = self.rotate_to_world(&self.pixel_ray(pixel)).normalize();
        (self.center(), dir)
    }
}

/// Lifts a pixel at camera-frame depth `depth` into world coordinates.
#[inline]
pub fn backproject(cam: &CameraParams, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::domain(format!("back-projection depth must be positive, got {depth}")));
    }
    Ok(cam.camera_to_world(&(cam.pixel_ray(pixel) * depth)))
}

/// Projects a world point; returns the pixel and the camera-frame z.
#[inline]
pub fn project(cam: &CameraParams, world_point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let p = cam.world_to_camera(world_point);
    if !(p.z > MIN_CAMERA_DEPTH) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok((cam.camera_to_pixel(&p), p.z))
}

/// Maps a reference pixel at depth `depth` to the source view.
///
/// The result may fall outside the source image; callers mask it.
#[inline]
pub fn warp_pixel(
    reference: &CameraParams,
    source: &CameraParams,
    pixel: Vector2<f64>,
    depth: f64,
) -> Result<(Vector2<f64>, f64)> {
    project(source, &backproject(reference, pixel, depth)?)
}

/// Warp result together with its derivative with respect to the reference depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpJacobian {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub d_pixel: Vector2<f64>,
    pub d_depth: f64,
}

/// [`warp_pixel`] plus `∂(pixel, depth)/∂depth`. Values are bitwise identical
/// to [`warp_pixel`].
#[inline]
pub fn warp_pixel_with_jacobian(
    reference: &CameraParams,
    source: &CameraParams,
    pixel: Vector2<f64>,
    depth: f64,
) -> Result<WarpJacobian> {
    let world = backproject(reference, pixel, depth)?;
    let (src_pixel, src_depth) = project(source, &world)?;
    let p = source.world_to_camera(&world);
    // camera-frame point is affine in depth: p(d) = d·a + b
    let a = source.rotate_to_camera(&reference.rotate_to_world(&reference.pixel_ray(pixel)));
    let k = source.intrinsics();
    let z2 = p.z * p.z;
    let dxn = (a.x * p.z - p.x * a.z) / z2;
    let dyn_ = (a.y * p.z - p.y * a.z) / z2;
    let d_pixel = Vector2::new(k[(0, 0)] * dxn + k[(0, 1)] * dyn_, k[(1, 1)] * dyn_);
    Ok(WarpJacobian {
        pixel: src_pixel,
        depth: src_depth,
        d_pixel,
        d_depth: a.z,
    })
}

/// Rotation taking world axes to a camera looking from `center` toward `target`
/// with image-down roughly along `down`.
pub fn look_at_rotation(center: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k100() -> Matrix3<f64> {
        Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0)
    }

    fn cam(k: Matrix3<f64>, t: Vector3<f64>) -> CameraParams {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        CameraParams::new(k, e, 1.0, 100.0, 101, 101).unwrap()
    }

    #[test]
    fn identity_backprojection() {
        let c = cam(Matrix3::identity(), Vector3::zeros());
        let w = backproject(&c, Vector2::new(0.0, 0.0), 5.0).unwrap();
        assert_eq!(w, Vector3::new(0.0, 0.0, 5.0));
        let (px, d) = project(&c, &w).unwrap();
        assert_eq!((px, d), (Vector2::new(0.0, 0.0), 5.0));
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let c = cam(k100(), Vector3::zeros());
        let w = backproject(&c, Vector2::new(50.0, 50.0), 10.0).unwrap();
        assert_eq!(w, Vector3::new(0.0, 0.0, 10.0));
    }

    #[test]
    fn translated_projection() {
        let c = cam(k100(), Vector3::new(-1.0, 0.0, 0.0));
        let (px, d) = project(&c, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert!((px - Vector2::new(40.0, 50.0)).norm() < 1e-12);
        assert_eq!(d, 10.0);
    }

    #[test]
    fn behind_camera_and_bad_depth() {
        let c = cam(Matrix3::identity(), Vector3::zeros());
        assert!(matches!(
            project(&c, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(matches!(backproject(&c, Vector2::zeros(), 0.0), Err(Error::Domain(_))));
        assert!(backproject(&c, Vector2::zeros(), -2.0).is_err());
    }

    #[test]
    fn x_baseline_warp() {
        let r = cam(k100(), Vector3::zeros());
        let s = cam(k100(), Vector3::new(-1.0, 0.0, 0.0));
        let (px, d) = warp_pixel(&r, &s, Vector2::new(50.0, 50.0), 10.0).unwrap();
        assert!((px - Vector2::new(40.0, 50.0)).norm() < 1e-12);
        assert_eq!(d, 10.0);
        for depth in [1.0, 3.5, 77.0] {
            let (p, dd) = warp_pixel(&r, &r, Vector2::new(12.25, 80.5), depth).unwrap();
            assert!((p - Vector2::new(12.25, 80.5)).norm() < 1e-12);
            assert!((dd - depth).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut k = k100();
        k[(1, 0)] = 1.0;
        assert!(CameraParams::new(k, Matrix4::identity(), 1.0, 2.0, 10, 10).is_err());
        let mut e = Matrix4::identity();
        e[(0, 0)] = 1.1;
        assert!(CameraParams::new(k100(), e, 1.0, 2.0, 10, 10).is_err());
        assert!(CameraParams::new(k100(), Matrix4::identity(), 2.0, 2.0, 10, 10).is_err());
        assert!(CameraParams::new(k100(), Matrix4::identity(), 0.0, 2.0, 10, 10).is_err());
    }

    #[test]
    fn downscaled_camera_matches_area_average_centers() {
        let c = cam(k100(), Vector3::zeros());
        let mut big = c.clone();
        big.width = 100;
        big.height = 100;
        let small = big.downscaled(4).unwrap();
        let world = Vector3::new(0.3, -0.2, 7.0);
        let (pf, _) = project(&big, &world).unwrap();
        let (pc, _) = project(&small, &world).unwrap();
        assert!((pf.x - (4.0 * pc.x + 1.5)).abs() < 1e-9);
        assert!((pf.y - (4.0 * pc.y + 1.5)).abs() < 1e-9);
    }

    fn rotation(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(ax, ay, az).matrix()
    }

    proptest! {
        #[test]
        fn backproject_project_round_trip(
            fx in 50.0..500.0f64, fy in 50.0..500.0f64,
            cx in 0.0..200.0f64, cy in 0.0..200.0f64,
            ax in -0.5..0.5f64, ay in -0.5..0.5f64, az in -0.5..0.5f64,
            tx in -2.0..2.0f64, ty in -2.0..2.0f64, tz in -2.0..2.0f64,
            px in 0.0..200.0f64, py in 0.0..200.0f64, depth in 0.5..50.0f64,
        ) {
            let c = CameraParams::from_parts(fx, fy, cx, cy, rotation(ax, ay, az),
                Vector3::new(tx, ty, tz), (0.1, 100.0), (200, 200)).unwrap();
            let w = backproject(&c, Vector2::new(px, py), depth).unwrap();
            let (p, d) = project(&c, &w).unwrap();
            prop_assert!((p - Vector2::new(px, py)).norm() < 1e-9);
            prop_assert!((d - depth).abs() < 1e-9);
        }

        #[test]
        fn jacobian_matches_finite_difference(
            ay in -0.3..0.3f64, tx in -1.5..1.5f64,
            px in 0.0..100.0f64, py in 0.0..100.0f64, depth in 2.0..20.0f64,
        ) {
            let r = cam(k100(), Vector3::zeros());
            let s = CameraParams::from_parts(100.0, 100.0, 50.0, 50.0, rotation(0.0, ay, 0.0),
                Vector3::new(tx, 0.1, 0.0), (1.0, 100.0), (101, 101)).unwrap();
            let j = warp_pixel_with_jacobian(&r, &s, Vector2::new(px, py), depth).unwrap();
            let (p0, d0) = warp_pixel(&r, &s, Vector2::new(px, py), depth).unwrap();
            prop_assert_eq!(j.pixel, p0);
            prop_assert_eq!(j.depth, d0);
            let h = 1e-6;
            let (pp, dp) = warp_pixel(&r, &s, Vector2::new(px, py), depth + h).unwrap();
            let (pm, dm) = warp_pixel(&r, &s, Vector2::new(px, py), depth - h).unwrap();
            let num = (pp - pm) / (2.0 * h);
            prop_assert!((num - j.d_pixel).norm() < 1e-5 * (1.0 + num.norm()));
            prop_assert!(((dp - dm) / (2.0 * h) - j.d_depth).abs() < 1e-6);
        }
    }
}
