//! Metrics text: one `key value` pair per line, values with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub fn format_value(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn render(pairs: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} {}", format_value(*v));
    }
    s
}

pub fn parse(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let mut parts = body.split_whitespace();
            let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(offset, format!("expected \"key value\", found {body:?}")));
            };
            out.push((k.to_string(), super::parse_num(offset, v, "a number")?));
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn write(path: &Path, pairs: &[(String, f64)]) -> Result<()> {
    super::write_file(path, render(pairs).as_bytes())
}

pub fn read(path: &Path) -> Result<Vec<(String, f64)>> {
    let bytes = super::read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(e.valid_up_to(), "metrics file is not UTF-8"))?;
    parse(text)
}
