//! Portable float maps: `Pf` (one channel) or `PF` (three channels), a
//! `<w> <h>` line and a scale line whose sign gives the byte order, then
//! 32-bit floats row by row starting from the bottom row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DepthMap, ImageGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Top row first, channels interleaved.
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::domain(format!("PFM holds 1 or 3 channels, not {c}"))),
        };
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::shape("PFM data length does not match its size"));
        }
        let mut out = format!("{magic}\n{} {}\n-1\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = |what: &str| -> Result<(usize, String)> {
            let start = pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| start + i)
                .ok_or_else(|| Error::parse(start, format!("truncated header, expected {what}")))?;
            pos = end + 1;
            let s = std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::parse(start, "header is not text"))?;
            Ok((start, s.trim().to_string()))
        };
        let (off, magic) = line("magic")?;
        let channels = match magic.as_str() {
            "Pf" => 1,
            "PF" => 3,
            _ => return Err(Error::parse(off, format!("bad PFM magic {magic:?}"))),
        };
        let (off, dims) = line("dimensions")?;
        let parts: Vec<&str> = dims.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::parse(off, format!("expected \"<width> <height>\", found {dims:?}")));
        }
        let width: usize = super::parse_num(off, parts[0], "width")?;
        let height: usize = super::parse_num(off, parts[1], "height")?;
        let (off, scale) = line("scale")?;
        let scale: f64 = super::parse_num(off, &scale, "scale")?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::parse(off, "scale must be non-zero"));
        }
        let little = scale < 0.0;
        let n = width * height * channels;
        let body = &bytes[pos..];
        if body.len() < 4 * n {
            return Err(Error::parse(pos + body.len(), format!("truncated data: {} of {} bytes", body.len(), 4 * n)));
        }
        let row = width * channels;
        let mut data = vec![0.0f32; n];
        for (i, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&super::read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_file(path, &self.encode()?)
    }
}

/// Invalid pixels are stored as 0.
pub fn depth_to_pfm(depth: &DepthMap) -> Pfm {
    Pfm {
        width: depth.width,
        height: depth.height,
        channels: 1,
        data: depth
            .depth
            .iter()
            .zip(&depth.mask)
            .map(|(&d, &m)| if m { d as f32 } else { 0.0 })
            .collect(),
    }
}

/// Positive finite values are valid.
pub fn pfm_to_depth(pfm: &Pfm) -> Result<DepthMap> {
    if pfm.channels != 1 {
        return Err(Error::domain("a depth map needs a single-channel PFM"));
    }
    let mask: Vec<bool> = pfm.data.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    let depth = pfm.data.iter().map(|&v| v as f64).collect();
    DepthMap::from_parts(pfm.width, pfm.height, depth, mask)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    depth_to_pfm(depth).write(path)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    pfm_to_depth(&Pfm::read(path)?)
}

pub fn image_to_pfm(image: &ImageGrid) -> Result<Pfm> {
    if !(image.channels == 1 || image.channels == 3) {
        return Err(Error::domain(format!("PFM holds 1 or 3 channels, image has {}", image.channels)));
    }
    Ok(Pfm {
        width: image.width,
        height: image.height,
        channels: image.channels,
        data: image.data.iter().map(|&v| v as f32).collect(),
    })
}

pub fn pfm_to_image(pfm: &Pfm) -> Result<ImageGrid> {
    ImageGrid::from_vec(pfm.width, pfm.height, pfm.channels, pfm.data.iter().map(|&v| v as f64).collect())
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    image_to_pfm(image)?.write(path)
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    pfm_to_image(&Pfm::read(path)?)
}
