//! Paired low/normal-light corpora and seeded patch sampling.
//!
//! Layout: `root/{train,eval}/{low,high}/<stem>.png`. The LOL folder names
//! `our485` and `eval15` are accepted in place of `train` and `eval`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, Field, Image};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn names(self) -> [&'static str; 2] {
        match self {
            Split::Train => ["train", "our485"],
            Split::Eval => ["eval", "eval15"],
        }
    }
}

/// Directory holding `low/` and `high/` for `split`.
pub fn split_dir(root: &Path, split: Split) -> Result<PathBuf> {
    split
        .names()
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.join("low").is_dir())
        .ok_or_else(|| {
            Error::Dataset(format!(
                "{} has no {}/low directory (or alias {}/low)",
                root.display(),
                split.names()[0],
                split.names()[1]
            ))
        })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExposurePair {
    pub id: String,
    pub low_path: PathBuf,
    pub high_path: PathBuf,
}

/// Matched pairs plus files that had no counterpart.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub pairs: Vec<ExposurePair>,
    pub unmatched: Vec<PathBuf>,
}

impl ScanReport {
    /// One line per unmatched file.
    pub fn warnings(&self) -> Vec<String> {
        self.unmatched
            .iter()
            .map(|p| format!("warning: no counterpart for {}", p.display()))
            .collect()
    }
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

/// Pairs `dir/low/<stem>` with `dir/high/<stem>`, sorted by stem.
pub fn scan_pairs(dir: &Path) -> Result<ScanReport> {
    let low = images_by_stem(&dir.join("low"))?;
    let mut high = images_by_stem(&dir.join("high"))?;
    if low.is_empty() && high.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", dir.display())));
    }
    let mut report = ScanReport::default();
    for (stem, low_path) in low {
        match high.remove(&stem) {
            Some(high_path) => {
                let a = image::image_dimensions(&low_path)?;
                let b = image::image_dimensions(&high_path)?;
                if a != b {
                    return Err(Error::Dataset(format!(
                        "pair {stem}: low is {}x{} but high is {}x{}",
                        a.0, a.1, b.0, b.1
                    )));
                }
                report.pairs.push(ExposurePair {
                    id: stem,
                    low_path,
                    high_path,
                });
            }
            None => report.unmatched.push(low_path),
        }
    }
    report.unmatched.extend(high.into_values());
    report.unmatched.sort();
    if report.pairs.is_empty() {
        return Err(Error::Dataset(format!("no matched pairs under {}", dir.display())));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPair {
    pub id: String,
    pub low: Image,
    pub high: Image,
}

/// Decoded pairs kept in memory for training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<LoadedPair>,
}

impl PairSet {
    pub fn load(pairs: &[ExposurePair]) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|p| {
                let low = load_image(&p.low_path)?;
                let high = load_image(&p.high_path)?;
                low.ensure_same_shape(&high)
                    .map_err(|e| Error::Dataset(format!("pair {}: {e}", p.id)))?;
                Ok(LoadedPair {
                    id: p.id.clone(),
                    low,
                    high,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    /// Scans `root` for `split` and loads every matched pair.
    pub fn open(root: &Path, split: Split) -> Result<(Self, ScanReport)> {
        let report = scan_pairs(&split_dir(root, split)?)?;
        Ok((Self::load(&report.pairs)?, report))
    }

    pub fn from_images(pairs: Vec<(String, Image, Image)>) -> Result<Self> {
        let pairs = pairs
            .into_iter()
            .map(|(id, low, high)| {
                low.ensure_same_shape(&high)?;
                Ok(LoadedPair { id, low, high })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Where a patch was cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchCoord {
    pub pair_id: String,
    pub y: usize,
    pub x: usize,
    pub flipped: bool,
}

impl fmt::Display for PatchCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@({}, {}){}", self.pair_id, self.y, self.x, if self.flipped { " flipped" } else { "" })
    }
}

/// `batch` aligned low/high patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub low: Vec<Field>,
    pub high: Vec<Field>,
    pub coords: Vec<PatchCoord>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Uniform pair, uniform position, and a fair-coin horizontal flip per sample,
/// applied identically to both exposures. Images smaller than the patch are
/// reflect-padded first.
pub fn sample_patches(set: &PairSet, patch: usize, batch: usize, seed: u64) -> Result<PatchBatch> {
    if set.is_empty() {
        return Err(Error::Dataset("no pairs to sample from".into()));
    }
    if patch == 0 || batch == 0 {
        return Err(Error::InvalidArgument("patch and batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PatchBatch {
        low: Vec::with_capacity(batch),
        high: Vec::with_capacity(batch),
        coords: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let pair = &set.pairs[rng.random_range(0..set.len())];
        let (h, w) = (pair.low.height().max(patch), pair.low.width().max(patch));
        let y = rng.random_range(0..=h - patch);
        let x = rng.random_range(0..=w - patch);
        let flipped = rng.random_bool(0.5);
        let cut = |img: &Image| {
            let padded = if (img.height(), img.width()) == (h, w) {
                img.window(y, x, patch, patch)
            } else {
                img.reflect_pad_to(h, w).window(y, x, patch, patch)
            };
            if flipped {
                padded.flip_horizontal()
            } else {
                padded
            }
        };
        out.low.push(cut(&pair.low));
        out.high.push(cut(&pair.high));
        out.coords.push(PatchCoord {
            pair_id: pair.id.clone(),
            y,
            x,
            flipped,
        });
    }
    Ok(out)
}
