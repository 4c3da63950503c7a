//! Flat `key = value` configuration text. Keys are dotted by section
//! (`stage2.num_hypotheses = 32`); `#` starts a comment line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::loss::LossWeights;
use crate::pipeline::{CascadeConfig, StageConfig};
use crate::refine::RefineSetup;
use crate::scene::SceneConfig;
use crate::splat::SplatConfig;

/// One `key = value` line and the byte offset where it starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub offset: usize,
}

pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::parse(offset, format!("expected \"key = value\", found {body:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::parse(offset, format!("bad key {k:?}")));
            }
            out.push(Entry {
                key: k.to_string(),
                value: v.to_string(),
                offset,
            });
        }
        offset += line.len();
    }
    Ok(out)
}

/// Nearest-neighbor evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub max_dist: f64,
    /// Rays per pixel side when sampling the ground-truth cloud.
    pub gt_supersample: usize,
    /// Views that must see a ground-truth point.
    pub gt_min_views: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_dist: 0.5,
            gt_supersample: 1,
            gt_min_views: 2,
        }
    }
}

/// Every tunable of the command-line tool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub cascade: CascadeConfig,
    pub refine: RefineSetup,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::domain(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::domain(format!("{key}: expected a boolean, found {v:?}"))),
    }
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match section {
            "" => match field {
                "seed" => self.scene.seed = num(key, v)?,
                "num_stages" => {
                    let n: usize = num(key, v)?;
                    if n == 0 {
                        return Err(Error::domain("num_stages must be at least 1"));
                    }
                    let stages = &mut self.cascade.stages;
                    stages.truncate(n);
                    while stages.len() < n {
                        stages.push(StageConfig::default_for(stages.len() + 1));
                    }
                }
                _ => return Err(unknown(key)),
            },
            "scene" => self.set_scene(key, field, v)?,
            "weights" => {
                let w: &mut LossWeights = &mut self.cascade.weights;
                match field {
                    "photometric" | "lambda1" => w.photometric = num(key, v)?,
                    "ssim" | "lambda2" => w.ssim = num(key, v)?,
                    "smoothness" | "lambda3" => w.smoothness = num(key, v)?,
                    "depth_consistency" | "lambda4" => w.depth_consistency = num(key, v)?,
                    _ => return Err(unknown(key)),
                }
            }
            "splat" => {
                let s: &mut SplatConfig = &mut self.cascade.splat;
                match field {
                    "tau" => s.tau = num(key, v)?,
                    "epsilon" => s.epsilon = num(key, v)?,
                    "soft_z_sigma" => s.soft_z_sigma = if v == "none" { None } else { Some(num(key, v)?) },
                    _ => return Err(unknown(key)),
                }
            }
            "refine" => {
                let r = &mut self.refine;
                match field {
                    "divisor" => r.divisor = num(key, v)?,
                    "num_hypotheses" => r.num_hypotheses = num(key, v)?,
                    "perturbation" => r.perturbation = num(key, v)?,
                    "sigma_bins" => r.sigma_bins = num(key, v)?,
                    "steps" => r.descent.steps = num(key, v)?,
                    "step_size" => r.descent.step_size = num(key, v)?,
                    "armijo" => r.descent.armijo = num(key, v)?,
                    "shrink" => r.descent.shrink = num(key, v)?,
                    "max_backtracks" => r.descent.max_backtracks = num(key, v)?,
                    "grow" => r.descent.grow = num(key, v)?,
                    "include_depth_consistency" => r.descent.include_depth_consistency = flag(key, v)?,
                    _ => return Err(unknown(key)),
                }
            }
            "fusion" => match field {
                "min_views" => self.fusion.min_views = num(key, v)?,
                "reproj_px" => self.fusion.reproj_px = num(key, v)?,
                "rel_depth_tol" => self.fusion.rel_depth_tol = num(key, v)?,
                _ => return Err(unknown(key)),
            },
            "eval" => match field {
                "max_dist" => self.eval.max_dist = num(key, v)?,
                "gt_supersample" => self.eval.gt_supersample = num(key, v)?,
                "gt_min_views" => self.eval.gt_min_views = num(key, v)?,
                _ => return Err(unknown(key)),
            },
            s if s.starts_with("stage") => {
                let k: usize = s["stage".len()..].parse().map_err(|_| unknown(key))?;
                if k == 0 || k > self.cascade.stages.len() {
                    return Err(Error::domain(format!(
                        "{key}: the cascade has stages 1..={}",
                        self.cascade.stages.len()
                    )));
                }
                let st = &mut self.cascade.stages[k - 1];
                match field {
                    "divisor" => st.divisor = num(key, v)?,
                    "num_hypotheses" => st.num_hypotheses = num(key, v)?,
                    "sampler" => st.sampler = v.parse()?,
                    "window_ratio" => st.window_ratio = num(key, v)?,
                    "temperature" => st.temperature = num(key, v)?,
                    "smoothing_radius" => st.smoothing_radius = num(key, v)?,
                    _ => return Err(unknown(key)),
                }
            }
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn set_scene(&mut self, key: &str, field: &str, v: &str) -> Result<()> {
        let s = &mut self.scene;
        match field {
            "primitive" => s.primitive = v.parse()?,
            "seed" => s.seed = num(key, v)?,
            "num_views" => s.num_views = num(key, v)?,
            "width" => s.width = num(key, v)?,
            "height" => s.height = num(key, v)?,
            "channels" => s.channels = num(key, v)?,
            "focal" => s.focal = num(key, v)?,
            "depth_min" => s.depth_min = num(key, v)?,
            "depth_max" => s.depth_max = num(key, v)?,
            "target_depth" => s.target_depth = num(key, v)?,
            "arc_step_deg" => s.arc_step_deg = num(key, v)?,
            "plane_tilt_deg" => s.plane_tilt_deg = num(key, v)?,
            "sphere_radius" => s.sphere_radius = num(key, v)?,
            "texture_period" => s.texture_period = num(key, v)?,
            "brightness_amplitude" => s.brightness_amplitude = num(key, v)?,
            "noise_sigma" => s.noise_sigma = num(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Applies every entry of a config text in order. Errors carry the byte
    /// offset of the offending line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_entries(text)? {
            self.set(&e.key, &e.value).map_err(|err| match err {
                Error::Domain(msg) => Error::parse(e.offset, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "config is not UTF-8"))?;
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.cascade.validate()?;
        self.refine.descent.validate()?;
        if self.fusion.min_views == 0 || !(self.eval.max_dist > 0.0) {
            return Err(Error::domain("fusion.min_views must be >= 1 and eval.max_dist > 0"));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::apply_text`] reads back.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        let s = &self.scene;
        put("scene.primitive", s.primitive.to_string());
        put("scene.seed", s.seed.to_string());
        put("scene.num_views", s.num_views.to_string());
        put("scene.width", s.width.to_string());
        put("scene.height", s.height.to_string());
        put("scene.channels", s.channels.to_string());
        put("scene.focal", format!("{:?}", s.focal));
        put("scene.depth_min", format!("{:?}", s.depth_min));
        put("scene.depth_max", format!("{:?}", s.depth_max));
        put("scene.target_depth", format!("{:?}", s.target_depth));
        put("scene.arc_step_deg", format!("{:?}", s.arc_step_deg));
        put("scene.plane_tilt_deg", format!("{:?}", s.plane_tilt_deg));
        put("scene.sphere_radius", format!("{:?}", s.sphere_radius));
        put("scene.texture_period", format!("{:?}", s.texture_period));
        put("scene.brightness_amplitude", format!("{:?}", s.brightness_amplitude));
        put("scene.noise_sigma", format!("{:?}", s.noise_sigma));
        put("num_stages", self.cascade.stages.len().to_string());
        for (i, st) in self.cascade.stages.iter().enumerate() {
            let k = i + 1;
            put(&format!("stage{k}.divisor"), st.divisor.to_string());
            put(&format!("stage{k}.num_hypotheses"), st.num_hypotheses.to_string());
            put(&format!("stage{k}.sampler"), st.sampler.to_string());
            put(&format!("stage{k}.window_ratio"), format!("{:?}", st.window_ratio));
            put(&format!("stage{k}.temperature"), format!("{:?}", st.temperature));
            put(&format!("stage{k}.smoothing_radius"), st.smoothing_radius.to_string());
        }
        let w = &self.cascade.weights;
        put("weights.photometric", format!("{:?}", w.photometric));
        put("weights.ssim", format!("{:?}", w.ssim));
        put("weights.smoothness", format!("{:?}", w.smoothness));
        put("weights.depth_consistency", format!("{:?}", w.depth_consistency));
        let sp = &self.cascade.splat;
        put("splat.tau", format!("{:?}", sp.tau));
        put("splat.epsilon", format!("{:?}", sp.epsilon));
        put("splat.soft_z_sigma", sp.soft_z_sigma.map_or("none".to_string(), |v| format!("{v:?}")));
        let r = &self.refine;
        put("refine.divisor", r.divisor.to_string());
        put("refine.num_hypotheses", r.num_hypotheses.to_string());
        put("refine.perturbation", format!("{:?}", r.perturbation));
        put("refine.sigma_bins", format!("{:?}", r.sigma_bins));
        put("refine.steps", r.descent.steps.to_string());
        put("refine.step_size", format!("{:?}", r.descent.step_size));
        put("refine.armijo", format!("{:?}", r.descent.armijo));
        put("refine.shrink", format!("{:?}", r.descent.shrink));
        put("refine.max_backtracks", r.descent.max_backtracks.to_string());
        put("refine.grow", format!("{:?}", r.descent.grow));
        put("refine.include_depth_consistency", r.descent.include_depth_consistency.to_string());
        put("fusion.min_views", self.fusion.min_views.to_string());
        put("fusion.reproj_px", format!("{:?}", self.fusion.reproj_px));
        put("fusion.rel_depth_tol", format!("{:?}", self.fusion.rel_depth_tol));
        put("eval.max_dist", format!("{:?}", self.eval.max_dist));
        put("eval.gt_supersample", self.eval.gt_supersample.to_string());
        put("eval.gt_min_views", self.eval.gt_min_views.to_string());
        out
    }

    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn unknown(key: &str) -> Error {
    Error::domain(format!("unknown config key {key:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Sampler;
    use crate::scene::Primitive;

    #[test]
    fn dotted_keys_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nstage2.num_hypotheses = 16\n\nscene.primitive=sphere\nseed = 7\nstage1.sampler = uniform\n")
            .unwrap();
        assert_eq!(c.cascade.stages[1].num_hypotheses, 16);
        assert_eq!(c.scene.primitive, Primitive::Sphere);
        assert_eq!(c.scene.seed, 7);
        assert_eq!(c.cascade.stages[0].sampler, Sampler::Uniform);
    }

    #[test]
    fn rendered_config_reads_back() {
        let mut c = RunConfig::default();
        c.set("stage3.temperature", "0.000123").unwrap();
        c.set("splat.soft_z_sigma", "0.05").unwrap();
        c.set("refine.include_depth_consistency", "true").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn errors_carry_line_offsets() {
        let mut c = RunConfig::default();
        let text = "seed = 1\nstage9.num_hypotheses = 3\n";
        match c.apply_text(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        match parse_entries("a = 1\nnot a pair\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        assert!(c.set("scene.width", "wide").is_err());
        assert!(c.set("bogus", "1").is_err());
    }

    #[test]
    fn stage_count_can_change() {
        let mut c = RunConfig::default();
        c.set("num_stages", "2").unwrap();
        assert_eq!(c.cascade.stages.len(), 2);
        assert!(c.set("stage3.divisor", "1").is_err());
    }
}
