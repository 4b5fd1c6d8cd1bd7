//! Patch extraction from images annotated with a lesion and a normal region.

use std::path::Path;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::pgm::{read_pgm, write_pgm, Pgm};
use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

pub const PATCH_SIZE: usize = 16;
/// A placement belongs to a region when at least this share of its pixels
/// lies inside the region mask.
pub const MEMBERSHIP: (usize, usize) = (7, 10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Lesion,
    Normal,
}

impl Region {
    pub fn label(self) -> usize {
        match self {
            Region::Lesion => 1,
            Region::Normal => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Lesion => "lesion",
            Region::Normal => "normal",
        }
    }
}

/// Greyscale image with two region masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Row-major pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub lesion: Vec<bool>,
    pub normal: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `16·16` row-major pixels.
    pub patch: Vec<f32>,
    pub label: usize,
    pub source_image: String,
    /// Top-left column.
    pub x: usize,
    /// Top-left row.
    pub y: usize,
}

impl AnnotatedImage {
    pub fn mask(&self, r: Region) -> &[bool] {
        match r {
            Region::Lesion => &self.lesion,
            Region::Normal => &self.normal,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.pixels.len() != n || self.lesion.len() != n || self.normal.len() != n {
            return Err(Error::Data(format!("{}: pixels and masks differ in size", self.name)));
        }
        for r in [Region::Lesion, Region::Normal] {
            if !self.mask(r).iter().any(|&m| m) {
                return Err(Error::Data(format!("{}: {} region is empty", self.name, r.name())));
            }
        }
        Ok(())
    }

    /// Top-left corners `(x, y)` of all patches that lie inside the image and
    /// have at least 70% of their pixels in region `r`, in row-major order.
    pub fn valid_placements(&self, r: Region, size: usize) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        if size > h || size > w {
            return Vec::new();
        }
        let mask = self.mask(r);
        let mut integral = vec![0usize; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += mask[y * w + x] as usize;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        let at = |y: usize, x: usize| integral[y * (w + 1) + x];
        let need = size * size * MEMBERSHIP.0;
        let mut out = Vec::new();
        for y in 0..=h - size {
            for x in 0..=w - size {
                let inside = at(y + size, x + size) + at(y, x) - at(y, x + size) - at(y + size, x);
                if inside * MEMBERSHIP.1 >= need {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn crop(&self, x: usize, y: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size);
        for row in y..y + size {
            out.extend_from_slice(&self.pixels[row * self.width + x..row * self.width + x + size]);
        }
        out
    }

    /// Read `<dir>/<name>.pgm`, `<name>.lesion.pgm` and `<name>.normal.pgm`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let img = read_pgm(&dir.join(format!("{name}.pgm")))?;
        let mut masks = Vec::new();
        for r in [Region::Lesion, Region::Normal] {
            let path = dir.join(format!("{name}.{}.pgm", r.name()));
            let m = read_pgm(&path)?;
            if (m.width, m.height) != (img.width, img.height) {
                return Err(Error::Data(format!(
                    "{}: mask is {}×{}, image is {}×{}",
                    path.display(),
                    m.width,
                    m.height,
                    img.width,
                    img.height
                )));
            }
            masks.push(m.mask());
        }
        let normal = masks.pop().expect("two masks");
        let lesion = masks.pop().expect("two masks");
        Ok(AnnotatedImage {
            name: name.to_string(),
            height: img.height,
            width: img.width,
            pixels: img.to_unit(),
            lesion,
            normal,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (w, h) = (self.width, self.height);
        let img = Pgm {
            width: w,
            height: h,
            pixels: self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        };
        write_pgm(&dir.join(format!("{}.pgm", self.name)), &img)?;
        for r in [Region::Lesion, Region::Normal] {
            let m = Pgm {
                width: w,
                height: h,
                pixels: self.mask(r).iter().map(|&b| if b { 255 } else { 0 }).collect(),
            };
            write_pgm(&dir.join(format!("{}.{}.pgm", self.name, r.name())), &m)?;
        }
        Ok(())
    }
}

/// Names of annotated images in `dir`: every `<name>.pgm` that has a
/// `<name>.lesion.pgm` sibling, sorted.
pub fn list_annotated(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = file.strip_suffix(".pgm") {
            if !stem.ends_with(".lesion") && !stem.ends_with(".normal") && dir.join(format!("{stem}.lesion.pgm")).exists() {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// `per_region` patches from each region: lesion patches first, then normal.
/// Placements are drawn uniformly without replacement, or with replacement
/// when a region admits fewer than `per_region` placements.
pub fn extract_patches(img: &AnnotatedImage, per_region: usize, rng: &mut Rng) -> Result<Vec<PatchSample>> {
    img.check()?;
    let mut out = Vec::with_capacity(2 * per_region);
    for r in [Region::Lesion, Region::Normal] {
        let mut valid = img.valid_placements(r, PATCH_SIZE);
        if valid.is_empty() {
            return Err(Error::Data(format!(
                "{}: {} region admits no {PATCH_SIZE}×{PATCH_SIZE} patch with ≥{}% coverage",
                img.name,
                r.name(),
                100 * MEMBERSHIP.0 / MEMBERSHIP.1
            )));
        }
        let chosen: Vec<(usize, usize)> = if valid.len() >= per_region {
            for k in 0..per_region {
                let j = k + rng.below(valid.len() - k);
                valid.swap(k, j);
            }
            valid.truncate(per_region);
            valid
        } else {
            (0..per_region).map(|_| valid[rng.below(valid.len())]).collect()
        };
        for (x, y) in chosen {
            out.push(PatchSample {
                patch: img.crop(x, y, PATCH_SIZE),
                label: r.label(),
                source_image: img.name.clone(),
                x,
                y,
            });
        }
    }
    Ok(out)
}

/// Extract patches from every image into a dataset and an unsplit manifest.
/// Each image draws from its own stream derived from `seed` and its name.
pub fn patch_dataset(images: &[AnnotatedImage], per_region: usize, seed: u64) -> Result<(Dataset, DatasetManifest)> {
    let mut data = Dataset::new(1, PATCH_SIZE, PATCH_SIZE);
    let mut manifest = DatasetManifest { seed, entries: Vec::new() };
    for img in images {
        let mut rng = Rng::new(derive_seed(seed, &format!("patches.{}", img.name)));
        for p in extract_patches(img, per_region, &mut rng)? {
            manifest.entries.push(ManifestEntry {
                sample_id: data.len(),
                split: None,
                label: p.label,
                source_image: p.source_image,
                x: p.x,
                y: p.y,
            });
            data.push(&p.patch, p.label)?;
        }
    }
    Ok((data, manifest))
}

/// Seeded annotated image: noisy background with a bright elliptical lesion
/// and a rectangular normal region away from it.
pub fn synth_annotated(name: &str, height: usize, width: usize, rng: &mut Rng) -> AnnotatedImage {
    let n = height * width;
    let (cy, cx) = (
        rng.uniform_range(0.3, 0.45) * height as f64,
        rng.uniform_range(0.3, 0.45) * width as f64,
    );
    let (ry, rx) = (
        rng.uniform_range(0.15, 0.25) * height as f64,
        rng.uniform_range(0.15, 0.25) * width as f64,
    );
    let mut lesion = vec![false; n];
    let mut normal = vec![false; n];
    let mut pixels = vec![0f32; n];
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            let inside = dy * dy + dx * dx <= 1.0;
            lesion[y * width + x] = inside;
            normal[y * width + x] = y as f64 >= 0.7 * height as f64 && x as f64 >= 0.55 * width as f64;
            let base = if inside { 0.7 } else { 0.35 };
            pixels[y * width + x] = (base + 0.1 * rng.normal()).clamp(0.0, 1.0) as f32;
        }
    }
    AnnotatedImage {
        name: name.to_string(),
        height,
        width,
        pixels,
        lesion,
        normal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_image(h: usize, w: usize) -> AnnotatedImage {
        let n = h * w;
        AnnotatedImage {
            name: "b".into(),
            height: h,
            width: w,
            pixels: (0..n).map(|i| (i % 7) as f32 / 7.0).collect(),
            lesion: (0..n).map(|i| i % w < w / 2).collect(),
            normal: (0..n).map(|i| i % w >= w / 2).collect(),
        }
    }

    #[test]
    fn placements_respect_threshold() {
        let img = block_image(20, 40);
        for r in [Region::Lesion, Region::Normal] {
            let valid = img.valid_placements(r, PATCH_SIZE);
            assert!(!valid.is_empty());
            for (x, y) in valid {
                let inside = (y..y + 16)
                    .flat_map(|yy| (x..x + 16).map(move |xx| (yy, xx)))
                    .filter(|&(yy, xx)| img.mask(r)[yy * 40 + xx])
                    .count();
                assert!(inside * 10 >= 7 * 256);
            }
        }
        // Lesion covers columns 0..20; at least 11.2 of 16 columns inside → x ≤ 8.
        assert_eq!(img.valid_placements(Region::Lesion, 16).iter().map(|p| p.0).max(), Some(8));
    }

    #[test]
    fn sixty_samples_and_determinism() {
        let img = synth_annotated("s", 64, 64, &mut Rng::new(1));
        let a = extract_patches(&img, 30, &mut Rng::new(9)).unwrap();
        let b = extract_patches(&img, 30, &mut Rng::new(9)).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|p| p.label == 1).count(), 30);
        assert!(a.iter().all(|p| p.patch.len() == 256 && p.x + 16 <= 64 && p.y + 16 <= 64));
    }

    #[test]
    fn single_placement_repeats() {
        let mut img = block_image(16, 16);
        img.lesion = vec![true; 256];
        img.normal = vec![true; 256];
        let p = extract_patches(&img, 30, &mut Rng::new(0)).unwrap();
        assert_eq!(p.len(), 60);
        assert!(p.iter().all(|s| (s.x, s.y) == (0, 0)));
    }

    #[test]
    fn region_without_placement_is_named() {
        let mut img = block_image(20, 40);
        img.normal = vec![false; 800];
        img.normal[0] = true;
        let err = extract_patches(&img, 30, &mut Rng::new(0)).unwrap_err();
        assert!(err.to_string().contains("normal region"), "{err}");
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_annotated("a1", 32, 40, &mut Rng::new(4));
        img.save(dir.path()).unwrap();
        let back = AnnotatedImage::load(dir.path(), "a1").unwrap();
        assert_eq!(back.lesion, img.lesion);
        assert_eq!(back.normal, img.normal);
        for (p, q) in back.pixels.iter().zip(&img.pixels) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(list_annotated(dir.path()).unwrap(), vec!["a1".to_string()]);
    }
}
