//! Datasets: IDX files, PGM masks, patch extraction, synthetic generators and
//! image-level splits.

pub mod idx;
pub mod manifest;
pub mod patches;
pub mod pgm;
pub mod synth;

use std::path::Path;

use crate::config::{DataConfig, DataKind, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub use manifest::{split_sources, DatasetManifest, ManifestEntry, Split};
pub use patches::{extract_patches, AnnotatedImage, PatchSample, PATCH_SIZE};

/// Packed list of labelled images, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `len · C·H·W` values, image-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Dataset {
            channels,
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, image: &[f32], label: usize) -> Result<()> {
        if image.len() != self.image_size() {
            return Err(Error::Shape(format!(
                "image of {} values pushed into a {}×{}×{} dataset",
                image.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if let Some(p) = image.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("pixel value {p} outside [0, 1]")));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_size();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.channels, self.height, self.width);
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Images `indices` as `[B, C, H, W]` plus their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_size());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64)));
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Number of samples per class, up to the largest label.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0; k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Assemble splits from a manifest whose `sample_id`s index `samples`.
    pub fn from_manifest(samples: &Dataset, manifest: &DatasetManifest) -> Result<Self> {
        let mut idx: [Vec<usize>; 3] = Default::default();
        for e in &manifest.entries {
            if e.sample_id >= samples.len() {
                return Err(Error::Data(format!(
                    "manifest sample {} beyond the {} stored images",
                    e.sample_id,
                    samples.len()
                )));
            }
            if samples.labels[e.sample_id] != e.label {
                return Err(Error::Data(format!(
                    "manifest label {} for sample {} disagrees with stored label {}",
                    e.label, e.sample_id, samples.labels[e.sample_id]
                )));
            }
            match e.split {
                Some(s) => idx[s as usize].push(e.sample_id),
                None => {
                    return Err(Error::Data(format!(
                        "sample {} has no split assignment; run the split step first",
                        e.sample_id
                    )))
                }
            }
        }
        Ok(Splits {
            train: samples.subset(&idx[0]),
            val: samples.subset(&idx[1]),
            test: samples.subset(&idx[2]),
        })
    }
}

/// File names inside a dataset directory.
pub const DIR_IMAGES: &str = "images.idx";
pub const DIR_LABELS: &str = "labels.idx";
pub const DIR_MANIFEST: &str = "manifest.tsv";

/// Write `samples` and `manifest` as a dataset directory.
pub fn write_dir(dir: &Path, samples: &Dataset, manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    idx::write_idx(&dir.join(DIR_IMAGES), &dir.join(DIR_LABELS), samples)?;
    manifest.write(&dir.join(DIR_MANIFEST))
}

pub fn read_dir(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let samples = idx::load_idx(&dir.join(DIR_IMAGES), &dir.join(DIR_LABELS))?;
    let manifest = DatasetManifest::read(&dir.join(DIR_MANIFEST))?;
    Ok((samples, manifest))
}

/// One manifest row per image, each image its own source, split 80/10/10.
pub fn manifest_per_image(samples: &Dataset, seed: u64) -> Result<DatasetManifest> {
    let mut m = DatasetManifest {
        seed,
        entries: samples
            .labels
            .iter()
            .enumerate()
            .map(|(i, &label)| ManifestEntry {
                sample_id: i,
                split: None,
                label,
                source_image: format!("img{i:05}"),
                x: 0,
                y: 0,
            })
            .collect(),
    };
    m.assign_splits(seed)?;
    Ok(m)
}

/// Build the train/val/test splits described by `data` for a model `model`.
pub fn load_splits(data: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Splits> {
    let splits = match data.kind {
        DataKind::SyntheticSimple | DataKind::SyntheticComplex => {
            let kind = if data.kind == DataKind::SyntheticSimple {
                synth::SynthKind::Simple
            } else {
                synth::SynthKind::Complex
            };
            let mut rng = Rng::derived(seed, "data.synth");
            let samples = synth::generate(kind, data.n, model.height, model.width, &mut rng)?;
            let manifest = manifest_per_image(&samples, crate::rng::derive_seed(seed, "data.split"))?;
            Splits::from_manifest(&samples, &manifest)?
        }
        DataKind::Dir => {
            let (samples, manifest) = read_dir(&data.dir)?;
            Splits::from_manifest(&samples, &manifest)?
        }
        DataKind::Idx => {
            let train_all = idx::load_idx(&data.train_images, &data.train_labels)?;
            let test_all = idx::load_idx(&data.test_images, &data.test_labels)?;
            let n_train = if data.train_limit == 0 {
                train_all.len().saturating_sub(data.val_limit)
            } else {
                data.train_limit
            };
            if n_train + data.val_limit > train_all.len() || n_train == 0 {
                return Err(Error::Data(format!(
                    "{} training images cannot supply {} train + {} validation samples",
                    train_all.len(),
                    n_train,
                    data.val_limit
                )));
            }
            let n_test = if data.test_limit == 0 {
                test_all.len()
            } else {
                data.test_limit.min(test_all.len())
            };
            let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
            Splits {
                train: train_all.subset(&range(0, n_train)),
                val: train_all.subset(&range(n_train, n_train + data.val_limit)),
                test: test_all.subset(&range(0, n_test)),
            }
        }
    };
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if !d.is_empty() && (d.channels, d.height, d.width) != (model.in_channels, model.height, model.width) {
            return Err(Error::Data(format!(
                "{name} images are {}×{}×{}, model expects {}×{}×{}",
                d.channels, d.height, d.width, model.in_channels, model.height, model.width
            )));
        }
        if let Some(&l) = d.labels.iter().find(|&&l| l >= model.num_classes) {
            return Err(Error::Data(format!(
                "{name} label {l} outside the model's {} classes",
                model.num_classes
            )));
        }
    }
    Ok(splits)
}
