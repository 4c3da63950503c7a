//! On-disk layout shared by the subcommands:
//!
//! ```text
//! images/00000000.pfm      view images, view 0 is the reference
//! cams/00000000_cam.txt    cameras
//! depths_gt/00000000.pfm   ground-truth depths (written by `synth`)
//! depths/00000000.pfm      estimated depths (written by `run`)
//! ```

use std::path::{Path, PathBuf};

use planesweep::io::cam_txt::{self, DEFAULT_NUM_DEPTH};
use planesweep::io::pfm;
use planesweep::scene::Scene;
use planesweep::{CameraParams, DepthMap, ImageGrid, View};

use crate::CliResult;

pub struct Dataset {
    pub views: Vec<View>,
    pub ground_truth: Option<Vec<DepthMap>>,
    /// Depths loaded by [`Dataset::read_with_depths`]; empty otherwise.
    pub depths: Vec<DepthMap>,
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:08}.pfm"))
}

fn cam_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("cams").join(format!("{i:08}_cam.txt"))
}

fn depth_path(dir: &Path, sub: &str, i: usize) -> PathBuf {
    dir.join(sub).join(format!("{i:08}.pfm"))
}

impl Dataset {
    pub fn from_scene(scene: &Scene) -> Self {
        Dataset {
            views: scene
                .views
                .iter()
                .map(|v| View {
                    image: v.image.clone(),
                    camera: v.camera.clone(),
                })
                .collect(),
            ground_truth: Some(scene.views.iter().map(|v| v.depth.clone()).collect()),
            depths: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let images: Vec<ImageGrid> = self.views.iter().map(|v| v.image.clone()).collect();
        let cams: Vec<CameraParams> = self.views.iter().map(|v| v.camera.clone()).collect();
        let gt = self.ground_truth.as_deref().unwrap_or(&[]);
        write_parts(dir, Some(&images), gt, &cams, "depths_gt")
    }

    pub fn write_parts(
        dir: &Path,
        images: Option<&[ImageGrid]>,
        depths: &[DepthMap],
        cams: &[CameraParams],
        depth_sub: &str,
    ) -> CliResult<()> {
        write_parts(dir, images, depths, cams, depth_sub)
    }

    /// Reads images and cameras, plus `depths_gt/` when present.
    pub fn read(dir: &Path) -> CliResult<Self> {
        let mut views = Vec::new();
        while image_path(dir, views.len()).exists() {
            let i = views.len();
            let image = pfm::read_image(&image_path(dir, i))?;
            let camera = cam_txt::read(&cam_path(dir, i), image.width, image.height)?;
            views.push(View { image, camera });
        }
        if views.is_empty() {
            return Err(format!("{} has no images/00000000.pfm", dir.display()).into());
        }
        let ground_truth = if depth_path(dir, "depths_gt", 0).exists() {
            Some(read_depths(dir, "depths_gt", views.len())?)
        } else {
            None
        };
        Ok(Dataset {
            views,
            ground_truth,
            depths: Vec::new(),
        })
    }

    pub fn read_with_depths(dir: &Path, sub: &str) -> CliResult<Self> {
        let mut ds = Self::read(dir)?;
        ds.depths = read_depths(dir, sub, ds.views.len())?;
        Ok(ds)
    }

    /// Views scaled down to the resolution of the loaded depths.
    pub fn views_at_depth_resolution(&self) -> CliResult<Vec<View>> {
        self.views
            .iter()
            .zip(&self.depths)
            .map(|(v, d)| {
                let factor = v.image.width / d.width.max(1);
                if factor == 0 || d.width * factor != v.image.width || d.height * factor != v.image.height {
                    return Err(format!(
                        "depth map {}x{} is not an integer downscale of image {}x{}",
                        d.width, d.height, v.image.width, v.image.height
                    )
                    .into());
                }
                Ok(View {
                    image: v.image.downsample(factor)?,
                    camera: v.camera.downscaled(factor)?,
                })
            })
            .collect()
    }
}

fn read_depths(dir: &Path, sub: &str, n: usize) -> CliResult<Vec<DepthMap>> {
    (0..n)
        .map(|i| Ok(pfm::read_depth(&depth_path(dir, sub, i))?))
        .collect()
}

fn write_parts(dir: &Path, images: Option<&[ImageGrid]>, depths: &[DepthMap], cams: &[CameraParams], depth_sub: &str) -> CliResult<()> {
    for sub in ["images", "cams", depth_sub] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (i, cam) in cams.iter().enumerate() {
        cam_txt::write(&cam_path(dir, i), cam, DEFAULT_NUM_DEPTH)?;
    }
    for (i, img) in images.unwrap_or(&[]).iter().enumerate() {
        pfm::write_image(&image_path(dir, i), img)?;
    }
    for (i, d) in depths.iter().enumerate() {
        pfm::write_depth(&depth_path(dir, depth_sub, i), d)?;
    }
    Ok(())
}
