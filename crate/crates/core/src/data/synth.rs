//! Seeded synthetic datasets.
//!
//! Both kinds draw one blob per image: a filled disk (class 1) or a thin ring
//! (class 0) of similar radius. `Simple` puts it on a flat dark background.
//! `Complex` adds a textured background of random level, contrast jitter and
//! distractor squares, so global intensity no longer separates the classes.

use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Simple,
    Complex,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Simple => "simple",
            SynthKind::Complex => "complex",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" | "synthetic-simple" => Ok(SynthKind::Simple),
            "complex" | "synthetic-complex" => Ok(SynthKind::Complex),
            _ => Err(Error::InvalidArgument(format!("synthetic kind must be simple or complex, got `{s}`"))),
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    r: f64,
    filled: bool,
}

impl Blob {
    fn draw(h: usize, w: usize, filled: bool, rng: &mut Rng) -> Self {
        let r = rng.uniform_range(0.25, 0.32) * h.min(w) as f64;
        let margin = r + 1.0;
        Blob {
            cy: rng.uniform_range(margin, h as f64 - margin),
            cx: rng.uniform_range(margin, w as f64 - margin),
            r,
            filled,
        }
    }

    /// Coverage of pixel `(y, x)` in `[0, 1]`, 4×4 supersampled.
    fn coverage(&self, y: usize, x: usize) -> f64 {
        let mut hit = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let py = y as f64 + (sy as f64 + 0.5) / 4.0 - self.cy;
                let px = x as f64 + (sx as f64 + 0.5) / 4.0 - self.cx;
                let d = (py * py + px * px).sqrt();
                let inside = if self.filled { d <= self.r } else { (d - self.r).abs() <= 0.6 };
                hit += inside as usize;
            }
        }
        hit as f64 / 16.0
    }
}

fn simple_image(h: usize, w: usize, label: usize, rng: &mut Rng) -> Vec<f32> {
    let blob = Blob::draw(h, w, label == 1, rng);
    let (bg, fg) = (0.1, 0.9);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = blob.coverage(y, x);
            out.push((bg + (fg - bg) * c) as f32);
        }
    }
    out
}

fn complex_image(h: usize, w: usize, label: usize, rng: &mut Rng) -> Vec<f32> {
    let level = rng.uniform_range(0.05, 0.55);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(0.05, 0.12),
                rng.uniform_range(-0.9, 0.9),
                rng.uniform_range(-0.9, 0.9),
                rng.uniform_range(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let contrast = rng.uniform_range(0.25, 0.45);
    let blob = Blob::draw(h, w, label == 1, rng);
    let n_distractors = 1 + rng.below(3);
    let distractors: Vec<(usize, usize, usize, f64)> = (0..n_distractors)
        .map(|_| {
            let s = 2 + rng.below(2);
            (rng.below(h - s + 1), rng.below(w - s + 1), s, rng.uniform_range(0.2, 0.45))
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = level;
            for &(amp, fy, fx, ph) in &waves {
                v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
            }
            v += 0.04 * rng.normal();
            for &(dy, dx, s, a) in &distractors {
                if (dy..dy + s).contains(&y) && (dx..dx + s).contains(&x) {
                    v += a;
                }
            }
            v += contrast * blob.coverage(y, x);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// `n` single-channel `h×w` images with alternating labels 0, 1, 0, ...
pub fn generate(kind: SynthKind, n: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be positive".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images must be at least 8×8, got {h}×{w}")));
    }
    let mut d = Dataset::new(1, h, w);
    for i in 0..n {
        let label = i % 2;
        let img = match kind {
            SynthKind::Simple => simple_image(h, w, label, rng),
            SynthKind::Complex => complex_image(h, w, label, rng),
        };
        d.push(&img, label)?;
    }
    Ok(d)
}

/// Accuracy of the best single threshold on the per-image pixel mean, over
/// both orientations, for a binary dataset.
pub fn threshold_oracle(d: &Dataset) -> f64 {
    let mut pairs: Vec<(f64, usize)> = (0..d.len())
        .map(|i| {
            let img = d.image(i);
            (img.iter().map(|&p| p as f64).sum::<f64>() / img.len() as f64, d.labels[i])
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let ones_total = pairs.iter().filter(|p| p.1 == 1).count();
    // Predict 1 above the cut, 0 at or below; `k` samples lie below.
    let mut ones_below = 0;
    let mut best = 0usize;
    for k in 0..=n {
        if k > 0 {
            ones_below += (pairs[k - 1].1 == 1) as usize;
            if k < n && pairs[k].0 == pairs[k - 1].0 {
                continue;
            }
        }
        let zeros_below = k - ones_below;
        let correct = zeros_below + (ones_total - ones_below);
        best = best.max(correct).max(n - correct);
    }
    best as f64 / n as f64
}
