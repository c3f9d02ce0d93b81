//! Checkpoint directories: a `manifest.toml` plus one little-endian blob per
//! parameterized layer.
//!
//! Each blob holds two records, kernel then bias. A record is a `u32` rank,
//! `rank` `u32` dimensions, then the `f32` values.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{self, ArchitectureOptions, Stage};
use crate::nn::Network;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub iteration: u64,
    #[serde(default)]
    pub architecture: ArchitectureOptions,
    pub layers: Vec<ManifestLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    pub file: String,
    pub kernel: Vec<usize>,
    pub bias: Vec<usize>,
}

/// A network together with the metadata needed to rebuild and resume it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub iteration: u64,
    pub architecture: ArchitectureOptions,
    pub network: Network,
}

impl Checkpoint {
    /// Freshly initialized weights.
    pub fn initialize(stage: Stage, architecture: ArchitectureOptions, seed: u64) -> Result<Self> {
        Ok(Self {
            stage,
            seed,
            iteration: 0,
            architecture,
            network: networks::build(stage, &architecture, seed)?,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            seed: self.seed,
            iteration: self.iteration,
            architecture: self.architecture,
            layers: self
                .network
                .params()
                .iter()
                .map(|p| ManifestLayer {
                    name: p.name.clone(),
                    file: format!("{}.bin", p.name),
                    kernel: p.kernel_shape.to_vec(),
                    bias: vec![p.bias.len()],
                })
                .collect(),
        }
    }

    /// Writes the directory, creating it if needed. Blobs are written before
    /// the manifest, so a directory with a manifest is always complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.network.is_finite() {
            return Err(Error::Checkpoint("refusing to save non-finite weights".into()));
        }
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        for (entry, p) in manifest.layers.iter().zip(self.network.params()) {
            let mut buf = Vec::with_capacity(4 * (p.len() + 8));
            write_record(&mut buf, &entry.kernel, &p.kernel);
            write_record(&mut buf, &entry.bias, &p.bias);
            fs::write(dir.join(&entry.file), buf)?;
        }
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest
            .architecture
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut network = networks::build(manifest.stage, &manifest.architecture, manifest.seed)?;
        let expected: Vec<String> = network.params().iter().map(|p| p.name.clone()).collect();
        let listed: Vec<String> = manifest.layers.iter().map(|l| l.name.clone()).collect();
        if expected != listed {
            return Err(Error::Checkpoint(format!(
                "layer list does not match the {} network",
                manifest.stage
            )));
        }
        for entry in &manifest.layers {
            let p = network.layer(&entry.name).expect("listed layer");
            if entry.kernel != p.kernel_shape || entry.bias != [p.bias.len()] {
                return Err(Error::Checkpoint(format!("{}: shape disagrees with architecture", entry.name)));
            }
            let path = dir.join(&entry.file);
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .map_err(|_| Error::MissingFile(path.clone()))?
                .read_to_end(&mut bytes)?;
            let mut cursor = bytes.as_slice();
            let kernel = read_record(&mut cursor, &entry.kernel, &path)?;
            let bias = read_record(&mut cursor, &entry.bias, &path)?;
            if !cursor.is_empty() {
                return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
            }
            network
                .set_layer(&entry.name, kernel, bias)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        }
        Ok(Self {
            stage: manifest.stage,
            seed: manifest.seed,
            iteration: manifest.iteration,
            architecture: manifest.architecture,
            network,
        })
    }

    /// Like [`Checkpoint::load`] but also checks the stage.
    pub fn load_stage(dir: &Path, stage: Stage) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        if ckpt.stage != stage {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {stage}",
                dir.display(),
                ckpt.stage
            )));
        }
        Ok(ckpt)
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn exists(dir: &Path) -> bool {
    manifest_path(dir).is_file()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn write_record(buf: &mut Vec<u8>, dims: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn take_u32(cursor: &mut &[u8], path: &Path) -> Result<u32> {
    if cursor.len() < 4 {
        return Err(Error::Checkpoint(format!("{}: truncated", path.display())));
    }
    let (head, rest) = cursor.split_at(4);
    *cursor = rest;
    Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
}

fn read_record(cursor: &mut &[u8], dims: &[usize], path: &Path) -> Result<Vec<f32>> {
    let rank = take_u32(cursor, path)? as usize;
    let found = (0..rank)
        .map(|_| take_u32(cursor, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if found != dims {
        return Err(Error::Checkpoint(format!(
            "{}: header {found:?} does not match manifest {dims:?}",
            path.display()
        )));
    }
    let n: usize = dims.iter().product();
    if cursor.len() < 4 * n {
        return Err(Error::Checkpoint(format!("{}: truncated", path.display())));
    }
    let (data, rest) = cursor.split_at(4 * n);
    *cursor = rest;
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
