//! Sample manifests and image-level train/val/test splits.
//!
//! Text format, one sample per line after a header:
//! `sample_id<TAB>split<TAB>label<TAB>source_image<TAB>x<TAB>y`, where `split`
//! is `train`, `val`, `test` or `-` (unassigned).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const HEADER: &str = "sample_id\tsplit\tlabel\tsource_image\tx\ty";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("split must be train, val or test, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub split: Option<Split>,
    pub label: usize,
    pub source_image: String,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Assign `n` source images to splits: a seeded shuffle, then the first
/// `round(0.8 n)` go to train, the next `round(0.1 n)` to val, the rest to
/// test. Needs at least 10 images.
pub fn split_sources(n: usize, seed: u64) -> Result<Vec<Split>> {
    if n < 10 {
        return Err(Error::Data(format!("{n} source images; an 80/10/10 split needs at least 10")));
    }
    let n_train = (n * 8 + 5) / 10;
    let n_val = (n + 5) / 10;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

impl DatasetManifest {
    /// Distinct source images in first-appearance order.
    pub fn sources(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.source_image.as_str()))
            .map(|e| e.source_image.as_str())
            .collect()
    }

    /// Split by source image so that no image contributes to two splits.
    /// Sources are sorted by name before shuffling, so the result depends only
    /// on the set of sources and `seed`.
    pub fn assign_splits(&mut self, seed: u64) -> Result<()> {
        let mut names: Vec<String> = self.sources().into_iter().map(String::from).collect();
        names.sort();
        let splits = split_sources(names.len(), seed)?;
        let map: BTreeMap<String, Split> = names.into_iter().zip(splits).collect();
        for e in &mut self.entries {
            e.split = Some(map[&e.source_image]);
        }
        self.seed = seed;
        Ok(())
    }

    /// Samples per split (unassigned samples are not counted).
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            if let Some(s) = e.split {
                c[s as usize] += 1;
            }
        }
        c
    }

    /// Source images per split.
    pub fn source_counts(&self) -> [usize; 3] {
        let mut sets: [std::collections::BTreeSet<&str>; 3] = Default::default();
        for e in &self.entries {
            if let Some(s) = e.split {
                sets[s as usize].insert(&e.source_image);
            }
        }
        [sets[0].len(), sets[1].len(), sets[2].len()]
    }

    /// Source images that appear in more than one split.
    pub fn leaking_sources(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut leaks = std::collections::BTreeSet::new();
        for e in &self.entries {
            if let Some(s) = e.split {
                if let Some(&prev) = seen.get(e.source_image.as_str()) {
                    if prev != s {
                        leaks.insert(e.source_image.clone());
                    }
                } else {
                    seen.insert(&e.source_image, s);
                }
            }
        }
        leaks.into_iter().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed {}\n{HEADER}\n", self.seed);
        for e in &self.entries {
            let split = e.split.map_or("-".to_string(), |s| s.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.sample_id, split, e.label, e.source_image, e.x, e.y
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (no, line) in text.lines().enumerate() {
            let bad = |d: &str| Error::Format(format!("manifest line {}: {d}", no + 1));
            if let Some(rest) = line.strip_prefix("# seed ") {
                seed = rest.trim().parse().map_err(|_| bad("bad seed"))?;
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                if line != HEADER {
                    return Err(bad("missing header"));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(&format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number `{s}`")));
            entries.push(ManifestEntry {
                sample_id: num(f[0])?,
                split: if f[1] == "-" { None } else { Some(f[1].parse().map_err(|_| bad("bad split"))?) },
                label: num(f[2])?,
                source_image: f[3].to_string(),
                x: num(f[4])?,
                y: num(f[5])?,
            });
        }
        if !saw_header {
            return Err(Error::Format("manifest has no header line".into()));
        }
        Ok(DatasetManifest { seed, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n_sources: usize, per: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for s in 0..n_sources {
            for k in 0..per {
                entries.push(ManifestEntry {
                    sample_id: entries.len(),
                    split: None,
                    label: k % 2,
                    source_image: format!("src{s}"),
                    x: k,
                    y: 2 * k,
                });
            }
        }
        DatasetManifest { seed: 0, entries }
    }

    #[test]
    fn ten_images_split_8_1_1() {
        let s = split_sources(10, 5).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        assert_eq!(s, split_sources(10, 5).unwrap());
        assert!(split_sources(9, 5).is_err());
    }

    #[test]
    fn proportions_within_one_image() {
        for n in 10..200 {
            let s = split_sources(n, n as u64).unwrap();
            let count = |k| s.iter().filter(|&&x| x == k).count() as f64;
            let nf = n as f64;
            assert!((count(Split::Train) - 0.8 * nf).abs() <= 1.0);
            assert!((count(Split::Val) - 0.1 * nf).abs() <= 1.0);
            assert!((count(Split::Test) - 0.1 * nf).abs() <= 1.0);
        }
    }

    #[test]
    fn no_source_spans_two_splits() {
        let mut m = manifest(13, 7);
        m.assign_splits(11).unwrap();
        assert!(m.leaking_sources().is_empty());
        assert_eq!(m.source_counts(), [10, 1, 2]);
        m.entries[0].split = Some(Split::Test);
        m.entries[1].split = Some(Split::Train);
        assert_eq!(m.leaking_sources(), vec!["src0".to_string()]);
    }

    #[test]
    fn text_round_trip() {
        let mut m = manifest(10, 3);
        let text = m.to_text();
        assert_eq!(DatasetManifest::from_text(&text).unwrap(), m);
        m.assign_splits(2).unwrap();
        assert_eq!(DatasetManifest::from_text(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::from_text("0\ttrain\t1\ta\t0\t0\n").is_err());
    }
}
