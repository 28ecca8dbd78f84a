//! Plain-data exports: CSV tables and ASCII PGM (P2) images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

/// ASCII greymap, 8-bit, max value 255. `values` are row-major and scaled so the largest
/// maps to 255 (an all-zero map stays black).
pub fn pgm_p2(width: usize, height: usize, values: &[f64]) -> String {
    assert_eq!(values.len(), width * height, "pgm extent mismatch");
    let peak = values.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if peak > 0.0 { (v.max(0.0) / peak * 255.0).round() } else { 0.0 };
                (q as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Parse a P2 image back into `(width, height, max, values)`.
pub fn parse_pgm_p2(text: &str) -> Option<(usize, usize, u32, Vec<u32>)> {
    let mut it = text.lines().filter(|l| !l.starts_with('#')).flat_map(str::split_whitespace);
    if it.next()? != "P2" {
        return None;
    }
    let w = it.next()?.parse().ok()?;
    let h = it.next()?.parse().ok()?;
    let max = it.next()?.parse().ok()?;
    let vals: Vec<u32> = it.map(|t| t.parse().ok()).collect::<Option<_>>()?;
    (vals.len() == w * h).then_some((w, h, max, vals))
}

pub fn csv<R: AsRef<[String]>>(header: &[&str], rows: impl IntoIterator<Item = R>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.as_ref().join(","));
    }
    s
}

pub fn write(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
