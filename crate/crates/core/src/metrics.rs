//! PSNR, SSIM, lightness order error and corpus reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ExposurePair;
use crate::error::{Error, Result};
use crate::imaging::{load_image, Image};
use crate::losses;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_LOE_GRID: usize = 50;

/// `10·log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.ensure_same_shape(y)?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Same kernel as the training loss.
pub fn ssim_metric(x: &Image, y: &Image) -> Result<f64> {
    losses::ssim(x, y)
}

/// Per-pixel maximum over RGB.
pub fn lightness(image: &Image) -> Vec<f64> {
    let n = image.pixels();
    (0..n)
        .map(|p| (0..image.channels()).map(|c| image.data()[c * n + p]).fold(f64::MIN, f64::max))
        .collect()
}

fn grid_positions(len: usize, grid: usize) -> Vec<usize> {
    (0..grid)
        .map(|i| (((i as f64 + 0.5) * len as f64 / grid as f64) as usize).min(len - 1))
        .collect()
}

/// Lightness order error on a `grid × grid` lattice of sites: for every
/// site, the fraction of sites whose order relative to it (`≥`) differs
/// between the two images; averaged and scaled by 1000.
pub fn loe(enhanced: &Image, reference: &Image, grid: usize) -> Result<f64> {
    enhanced.ensure_same_shape(reference)?;
    if grid == 0 {
        return Err(Error::InvalidArgument("LOE grid must be >= 1".into()));
    }
    let (h, w) = (enhanced.height(), enhanced.width());
    let (le, lr) = (lightness(enhanced), lightness(reference));
    let ys = grid_positions(h, grid);
    let xs = grid_positions(w, grid);
    let sites: Vec<usize> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| y * w + x)).collect();
    let se: Vec<f64> = sites.iter().map(|&i| le[i]).collect();
    let sr: Vec<f64> = sites.iter().map(|&i| lr[i]).collect();
    let m = sites.len();
    let total: usize = (0..m)
        .into_par_iter()
        .map(|p| (0..m).filter(|&q| (se[p] >= se[q]) != (sr[p] >= sr[q])).count())
        .sum();
    Ok(1000.0 * total as f64 / (m * m) as f64)
}

/// An external no-reference scorer: invoked with an image path, prints one
/// number on stdout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiqePlugin {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl NiqePlugin {
    /// Splits a command line on whitespace.
    pub fn parse(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty NIQE command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }

    pub fn score(&self, image: &Path) -> Result<f64> {
        let out = Command::new(&self.program).args(&self.args).arg(image).output()?;
        if !out.status.success() {
            return Err(Error::InvalidArgument(format!(
                "NIQE command {} failed on {}: {}",
                self.program,
                image.display(),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("NIQE command printed {:?}, expected a number", text.trim())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub loe_grid: usize,
    pub niqe: Option<NiqePlugin>,
    /// Low-light inputs, for plain LOE against the input.
    pub input_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            loe_grid: DEFAULT_LOE_GRID,
            niqe: None,
            input_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub means: BTreeMap<String, f64>,
    pub skipped: Vec<PathBuf>,
    pub loe_grid: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        self.means.get(column).copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head = vec!["id".to_owned()];
        head.extend(self.columns.iter().cloned());
        w.write_record(&head)?;
        for row in &self.rows {
            let mut rec = vec![row.id.clone()];
            rec.extend(self.columns.iter().map(|c| format!("{:.6}", row.values[c])));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["mean".to_owned()];
        rec.extend(self.columns.iter().map(|c| format!("{:.6}", self.means[c])));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text table followed by the settings used.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "id");
        for c in &self.columns {
            let _ = write!(s, " {c:>10}");
        }
        s.push('\n');
        let line = |s: &mut String, id: &str, values: &dyn Fn(&str) -> f64| {
            let _ = write!(s, "{id:<width$}");
            for c in &self.columns {
                let _ = write!(s, " {:>10.4}", values(c));
            }
            s.push('\n');
        };
        for r in &self.rows {
            line(&mut s, &r.id, &|c| r.values[c]);
        }
        line(&mut s, "mean", &|c| self.means[c]);
        let _ = writeln!(
            s,
            "{} image(s); LOE grid {g}x{g}; SSIM window {}, sigma {}",
            self.rows.len(),
            self.ssim_window,
            self.ssim_sigma,
            g = self.loe_grid,
        );
        s
    }
}

fn evaluate_pair(pair: &ExposurePair, config: &EvalConfig) -> Result<MetricRow> {
    let enhanced = load_image(&pair.low_path)?;
    let reference = load_image(&pair.high_path)?;
    let mut values = BTreeMap::new();
    values.insert("psnr".to_owned(), psnr(&enhanced, &reference)?);
    values.insert("ssim".to_owned(), ssim_metric(&enhanced, &reference)?);
    values.insert("loe_ref".to_owned(), loe(&enhanced, &reference, config.loe_grid)?);
    if let Some(dir) = &config.input_dir {
        let input = find_stem(dir, &pair.id)
            .ok_or_else(|| Error::Dataset(format!("no input image for {} in {}", pair.id, dir.display())))?;
        values.insert("loe".to_owned(), loe(&enhanced, &load_image(input)?, config.loe_grid)?);
    }
    if let Some(plugin) = &config.niqe {
        values.insert("niqe".to_owned(), plugin.score(&pair.low_path)?);
    }
    Ok(MetricRow {
        id: pair.id.clone(),
        values,
    })
}

fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// Scores every enhanced image against the reference with the same stem.
pub fn evaluate_corpus(enhanced_dir: &Path, reference_dir: &Path, config: &EvalConfig) -> Result<MetricReport> {
    if config.loe_grid == 0 {
        return Err(Error::InvalidArgument("LOE grid must be >= 1".into()));
    }
    let staging = matched_files(enhanced_dir, reference_dir)?;
    if staging.0.is_empty() {
        return Err(Error::Dataset(format!(
            "no matching file names between {} and {}",
            enhanced_dir.display(),
            reference_dir.display()
        )));
    }
    let rows = staging
        .0
        .par_iter()
        .map(|p| evaluate_pair(p, config))
        .collect::<Result<Vec<_>>>()?;
    let mut columns = vec!["psnr".to_owned(), "ssim".to_owned(), "loe_ref".to_owned()];
    if config.input_dir.is_some() {
        columns.push("loe".to_owned());
    }
    if config.niqe.is_some() {
        columns.push("niqe".to_owned());
    }
    let means = columns
        .iter()
        .map(|c| (c.clone(), rows.iter().map(|r| r.values[c]).sum::<f64>() / rows.len() as f64))
        .collect();
    Ok(MetricReport {
        columns,
        rows,
        means,
        skipped: staging.1,
        loe_grid: config.loe_grid,
        ssim_window: losses::WINDOW,
        ssim_sigma: losses::SIGMA,
    })
}

/// Stem-matched (enhanced, reference) pairs and the unmatched files.
fn matched_files(enhanced_dir: &Path, reference_dir: &Path) -> Result<(Vec<ExposurePair>, Vec<PathBuf>)> {
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(dir).map_err(|_| Error::MissingFile(dir.to_path_buf()))? {
            let path = entry?.path();
            let ok = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
            if let (true, Some(stem)) = (ok, path.file_stem().and_then(|s| s.to_str())) {
                out.insert(stem.to_owned(), path.clone());
            }
        }
        Ok(out)
    };
    let enhanced = list(enhanced_dir)?;
    let mut reference = list(reference_dir)?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (stem, path) in enhanced {
        match reference.remove(&stem) {
            Some(r) => pairs.push(ExposurePair {
                id: stem,
                low_path: path,
                high_path: r,
            }),
            None => skipped.push(path),
        }
    }
    skipped.extend(reference.into_values());
    skipped.sort();
    Ok((pairs, skipped))
}
