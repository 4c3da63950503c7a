//! Binary little-endian PLY point clouds: float `x y z` and optional uchar
//! `red green blue` per vertex.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fusion::PointCloud;

pub fn encode(cloud: &PointCloud) -> Result<Vec<u8>> {
    if let Some(c) = &cloud.colors {
        if c.len() != cloud.points.len() {
            return Err(Error::shape("one color per point is required"));
        }
    }
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.points.len()
    );
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let stride = if cloud.colors.is_some() { 15 } else { 12 };
    let mut out = header.into_bytes();
    out.reserve(stride * cloud.points.len());
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(c) = &cloud.colors {
            out.extend_from_slice(&c[i]);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::parse(pos, "header ends without end_header"))?;
        let text = std::str::from_utf8(&bytes[pos..end]).map_err(|_| Error::parse(pos, "header is not text"))?;
        let text = text.trim_end_matches('\r');
        lines.push((pos, text));
        pos = end + 1;
        if text == "end_header" {
            break;
        }
    }
    let body_start = pos;
    let mut it = lines.into_iter();
    match it.next() {
        Some((_, "ply")) => {}
        Some((off, l)) => return Err(Error::parse(off, format!("expected \"ply\", found {l:?}"))),
        None => return Err(Error::parse(0, "empty file")),
    }
    let mut count = None;
    let mut props: Vec<(usize, String, String)> = Vec::new();
    let mut format_seen = false;
    for (off, line) in it {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", f, ..] => return Err(Error::parse(off, format!("unsupported PLY format {f:?}"))),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(off, "duplicate vertex element"));
                }
                count = Some(super::parse_num::<usize>(off, n, "vertex count")?);
            }
            ["element", name, _] => return Err(Error::parse(off, format!("unsupported element {name:?}"))),
            ["property", ty, name] if count.is_some() => props.push((off, ty.to_string(), name.to_string())),
            _ => return Err(Error::parse(off, format!("unexpected header line {line:?}"))),
        }
    }
    if !format_seen {
        return Err(Error::parse(0, "missing format line"));
    }
    let n = count.ok_or_else(|| Error::parse(0, "missing vertex element"))?;
    let names: Vec<&str> = props.iter().map(|p| p.2.as_str()).collect();
    let has_color = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "red", "green", "blue"] | ["x", "y", "z", "r", "g", "b"] => true,
        _ => {
            let off = props.first().map_or(0, |p| p.0);
            return Err(Error::parse(off, format!("unsupported vertex properties {names:?}")));
        }
    };
    for (i, (off, ty, _)) in props.iter().enumerate() {
        let ok = if i < 3 { ty == "float" || ty == "float32" } else { ty == "uchar" || ty == "uint8" };
        if !ok {
            return Err(Error::parse(*off, format!("unsupported property type {ty:?}")));
        }
    }
    let stride = if has_color { 15 } else { 12 };
    let body = &bytes[body_start..];
    if body.len() < stride * n {
        return Err(Error::parse(
            body_start + body.len(),
            format!("truncated vertex data: {} of {} bytes", body.len(), stride * n),
        ));
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = has_color.then(|| Vec::with_capacity(n));
    for rec in body[..stride * n].chunks_exact(stride) {
        let f = |k: usize| f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]) as f64;
        points.push(Vector3::new(f(0), f(1), f(2)));
        if let Some(c) = colors.as_mut() {
            c.push([rec[12], rec[13], rec[14]]);
        }
    }
    Ok(PointCloud { points, colors })
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    super::write_file(path, &encode(cloud)?)
}

pub fn read(path: &Path) -> Result<PointCloud> {
    decode(&super::read_file(path)?)
}
