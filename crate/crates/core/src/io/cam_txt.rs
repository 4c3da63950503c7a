//! MVSNet-style camera text: `extrinsic` and 16 row-major values,
//! `intrinsic` and 9 values, then `depth_min depth_interval [num_depth [depth_max]]`.
//!
//! Image size is not part of the format and is supplied by the caller.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4};

use crate::camera::CameraParams;
use crate::error::{Error, Result};

/// Hypothesis count assumed when the depth line has only two values.
pub const DEFAULT_NUM_DEPTH: usize = 192;

/// Parsed camera text, before it is tied to an image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CamText {
    pub extrinsic: Matrix4<f64>,
    pub intrinsic: Matrix3<f64>,
    pub depth_min: f64,
    pub depth_interval: f64,
    pub num_depth: usize,
    pub depth_max: f64,
}

impl CamText {
    pub fn parse(text: &str) -> Result<Self> {
        let toks = super::tokens(text);
        let mut i = 0;
        let expect_word = |word: &str, i: &mut usize| -> Result<()> {
            match toks.get(*i) {
                Some((_, t)) if *t == word => {
                    *i += 1;
                    Ok(())
                }
                Some((off, t)) => Err(Error::parse(*off, format!("expected {word:?}, found {t:?}"))),
                None => Err(Error::parse(text.len(), format!("expected {word:?}, found end of file"))),
            }
        };
        let numbers = |n: usize, i: &mut usize, what: &str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (off, t) = toks
                    .get(*i)
                    .ok_or_else(|| Error::parse(text.len(), format!("truncated {what}")))?;
                out.push(super::parse_num(*off, t, what)?);
                *i += 1;
            }
            Ok(out)
        };
        expect_word("extrinsic", &mut i)?;
        let e = numbers(16, &mut i, "extrinsic value")?;
        expect_word("intrinsic", &mut i)?;
        let k = numbers(9, &mut i, "intrinsic value")?;
        let rest = &toks[i..];
        if rest.len() < 2 || rest.len() > 4 {
            let off = rest.first().map_or(text.len(), |t| t.0);
            return Err(Error::parse(off, format!("depth line needs 2 to 4 values, found {}", rest.len())));
        }
        let depth_min: f64 = super::parse_num(rest[0].0, rest[0].1, "depth_min")?;
        let depth_interval: f64 = super::parse_num(rest[1].0, rest[1].1, "depth_interval")?;
        let num_depth = match rest.get(2) {
            // some writers emit the count as a float
            Some((off, t)) => {
                let v: f64 = super::parse_num(*off, t, "num_depth")?;
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(Error::parse(*off, format!("num_depth must be a positive integer, found {t:?}")));
                }
                v as usize
            }
            None => DEFAULT_NUM_DEPTH,
        };
        let depth_max = match rest.get(3) {
            Some((off, t)) => super::parse_num(*off, t, "depth_max")?,
            None => depth_min + depth_interval * (num_depth as f64 - 1.0),
        };
        Ok(Self {
            extrinsic: Matrix4::from_row_slice(&e),
            intrinsic: Matrix3::from_row_slice(&k),
            depth_min,
            depth_interval,
            num_depth,
            depth_max,
        })
    }

    pub fn from_camera(cam: &CameraParams, num_depth: usize) -> Self {
        let n = num_depth.max(2);
        Self {
            extrinsic: *cam.extrinsics(),
            intrinsic: *cam.intrinsics(),
            depth_min: cam.depth_min,
            depth_interval: cam.depth_range() / (n as f64 - 1.0),
            num_depth: n,
            depth_max: cam.depth_max,
        }
    }

    pub fn to_camera(&self, width: usize, height: usize) -> Result<CameraParams> {
        CameraParams::new(self.intrinsic, self.extrinsic, self.depth_min, self.depth_max, width, height)
    }

    /// Values are written in shortest round-trip form.
    pub fn render(&self) -> String {
        let mut s = String::from("extrinsic\n");
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:?}", self.extrinsic[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s.push_str("\nintrinsic\n");
        for r in 0..3 {
            let row: Vec<String> = (0..3).map(|c| format!("{:?}", self.intrinsic[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(
            s,
            "\n{:?} {:?} {} {:?}",
            self.depth_min, self.depth_interval, self.num_depth, self.depth_max
        );
        s
    }
}

pub fn read(path: &Path, width: usize, height: usize) -> Result<CameraParams> {
    let bytes = super::read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "camera file is not UTF-8"))?;
    CamText::parse(text)?.to_camera(width, height)
}

pub fn write(path: &Path, cam: &CameraParams, num_depth: usize) -> Result<()> {
    super::write_file(path, CamText::from_camera(cam, num_depth).render().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    const FIXTURE: &str = "extrinsic
1 0 0 -1
0 1 0 0
0 0 1 0
0 0 0 1

intrinsic
100 0 50
0 100 50
0 0 1

2.5 0.5
";

    #[test]
    fn fixture_parses() {
        let c = CamText::parse(FIXTURE).unwrap();
        assert_eq!(c.num_depth, DEFAULT_NUM_DEPTH);
        assert_eq!(c.depth_max, 2.5 + 0.5 * 191.0);
        let cam = c.to_camera(100, 100).unwrap();
        assert_eq!(*cam.intrinsics(), Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0));
        assert_eq!(cam.translation(), Vector3::new(-1.0, 0.0, 0.0));
        let (px, d) = crate::camera::project(&cam, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!((px.x, px.y, d), (40.0, 50.0, 10.0));
    }

    #[test]
    fn three_and_four_value_depth_lines() {
        let three = FIXTURE.replace("2.5 0.5", "2.5 0.5 11");
        assert_eq!(CamText::parse(&three).unwrap().depth_max, 7.5);
        let four = FIXTURE.replace("2.5 0.5", "2.5 0.5 11.0 9");
        let c = CamText::parse(&four).unwrap();
        assert_eq!((c.num_depth, c.depth_max), (11, 9.0));
    }

    #[test]
    fn round_trip_is_exact() {
        let r = crate::camera::look_at_rotation(&Vector3::new(1.3, -0.2, 0.1), &Vector3::new(0.0, 0.0, 5.0), &Vector3::new(0.0, 1.0, 0.0));
        let cam = CameraParams::from_parts(101.3, 99.7, 63.5, 47.25, r, Vector3::new(0.1, 0.2, -0.3), (3.0, 7.0), (128, 96)).unwrap();
        let back = CamText::parse(&CamText::from_camera(&cam, 48).render()).unwrap().to_camera(128, 96).unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn errors_point_at_the_bad_token() {
        let bad = FIXTURE.replace("0 100 50", "0 1x0 50");
        let off = bad.find("1x0").unwrap();
        match CamText::parse(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, off),
            other => panic!("{other:?}"),
        }
        match CamText::parse("intrinsic\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let short = FIXTURE.replace("2.5 0.5\n", "2.5\n");
        assert!(matches!(CamText::parse(&short), Err(Error::Parse { .. })));
    }
}
