//! Binary greyscale PGM (`P5`, 8-bit).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    /// Row-major, scaled so `maxval` maps to 255.
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// Binary mask: a pixel is set when its value is at least 128.
    pub fn mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p >= 128).collect()
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }
}

fn header_fields(bytes: &[u8], path: &Path) -> Result<([usize; 3], usize)> {
    let fmt = |d: &str| Error::Format(format!("{}: {d}", path.display()));
    if bytes.get(..2) != Some(b"P5") {
        return Err(fmt("not a binary PGM (missing P5 signature)"));
    }
    let mut pos = 2;
    let mut vals = [0usize; 3];
    for v in &mut vals {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => {
                    return Err(Error::Truncated {
                        path: path.into(),
                        detail: "header incomplete".into(),
                    })
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("malformed header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((vals, pos + 1)),
        _ => Err(fmt("header not terminated by whitespace")),
    }
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ([width, height, maxval], start) = header_fields(&bytes, path)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{}: unsupported PGM {width}×{height} with maxval {maxval}",
            path.display()
        )));
    }
    let n = width * height;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} of {n} pixels present", payload.len()),
        });
    }
    let pixels = payload[..n]
        .iter()
        .map(|&p| ((p.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok(Pgm { width, height, pixels })
}

pub fn write_pgm(path: &Path, pgm: &Pgm) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", pgm.width, pgm.height).into_bytes();
    out.extend_from_slice(&pgm.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Quantize `[0, 1]` values to an 8-bit PGM.
pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Pgm {
    Pgm {
        width,
        height,
        pixels: values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let pgm = Pgm { width: 3, height: 2, pixels: vec![0, 127, 128, 255, 10, 200] };
        write_pgm(&p, &pgm).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back, pgm);
        assert_eq!(back.mask(), vec![false, false, true, true, false, true]);
    }

    #[test]
    fn comments_and_maxval_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5 # comment\n2 1\n# another\n15\n".to_vec();
        bytes.extend([15, 7]);
        std::fs::write(&p, bytes).unwrap();
        let g = read_pgm(&p).unwrap();
        assert_eq!(g.pixels, vec![255, 119]);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"P5\n4 4\n255\n\0\0").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Truncated { .. })));
    }
}
