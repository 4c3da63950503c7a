//! Plane-sweep multi-view stereo with probability-volume splatting.
//!
//! The crate covers the geometric and numerical core of an unsupervised
//! multi-view stereo pipeline: pinhole warping, cost volumes, adaptive depth
//! hypotheses, forward splatting for source-depth synthesis and image
//! rendering, the unsupervised loss terms with analytic gradients, a synthetic
//! scene generator for ground truth, point-cloud fusion, and file formats.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cost_volume;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod loss;
pub mod pipeline;
pub mod refine;
pub mod scene;
pub mod sampling;
pub mod splat;

pub use camera::{backproject, project, warp_pixel, CameraParams};
pub use cost_volume::{CostVolume, FeatureGrid, ProbabilityVolume};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, PointCloud};
pub use grid::{DepthMap, ImageGrid};
pub use io::config::RunConfig;
pub use loss::{LossBreakdown, LossWeights};
pub use pipeline::{run_cascade, CascadeConfig, Sampler, StageConfig, View};
pub use refine::{RefineConfig, RefineSetup};
pub use scene::{generate_synthetic_scene, Primitive, SceneConfig};
pub use sampling::{DepthHypothesisGrid, UncertaintyMap};
pub use splat::SplatConfig;
