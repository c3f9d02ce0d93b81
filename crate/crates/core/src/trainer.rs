//! Staged SGD training: decomposition first, then restoration and
//! adjustment against a frozen decomposition network.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{sample_patches, PairSet};
use crate::error::{Error, Result};
use crate::imaging::{Field, IlluminationMap};
use crate::losses::{
    adjustment_loss_with_grad, decomposition_loss_with_grad, restoration_loss_with_grad, DecompositionInputs,
    DecompositionLossWeights, LossBreakdown,
};
use crate::networks::{compute_ratio, decompose_tensor, expand_ratio, restoration_inputs, ArchitectureOptions, Stage};
use crate::nn::{Gradients, Network, Tensor};

pub const LOSS_LOG: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub iterations: u64,
    /// Defaults to 10 for decomposition and 4 otherwise.
    pub batch: Option<usize>,
    /// Defaults to 48 for decomposition and 384 otherwise.
    pub patch: Option<usize>,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Write a loss row every this many iterations.
    pub log_every: u64,
    /// Save every this many iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `checkpoint_dir` when one exists.
    pub resume: bool,
    /// Worker threads for per-sample parallelism; 0 uses all cores.
    pub threads: usize,
    pub loss: DecompositionLossWeights,
    pub architecture: ArchitectureOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Decomposition,
            learning_rate: 1e-4,
            iterations: 1000,
            batch: None,
            patch: None,
            seed: 0,
            clip_norm: 5.0,
            log_every: 1,
            checkpoint_every: 0,
            checkpoint_dir: None,
            resume: false,
            threads: 0,
            loss: DecompositionLossWeights::default(),
            architecture: ArchitectureOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn batch(&self) -> usize {
        self.batch.unwrap_or(match self.stage {
            Stage::Decomposition => 10,
            _ => 4,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch.unwrap_or(match self.stage {
            Stage::Decomposition => 48,
            _ => 384,
        })
    }

    /// Reads a TOML file; missing keys take their defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch() == 0 || self.patch() == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        let multiple = match self.stage {
            Stage::Restoration => 16,
            _ => 4,
        };
        if self.patch() % multiple != 0 {
            return Err(Error::Config(format!(
                "{} patches must be a multiple of {multiple}, got {}",
                self.stage,
                self.patch()
            )));
        }
        self.loss.validate()?;
        self.architecture.validate()
    }
}

/// Batch-mean loss after one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the randomness of one iteration, independent of earlier ones so
/// that resumed runs replay the same trajectory.
pub fn iteration_seed(seed: u64, iteration: u64, stream: u64) -> u64 {
    mix(mix(seed, iteration), stream)
}

/// Draws the adjustment direction for each sample: `true` maps low → high.
pub fn adjustment_directions(seed: u64, iteration: u64, batch: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(seed, iteration, 1));
    (0..batch).map(|_| rng.random_bool(0.5)).collect()
}

struct LossLog {
    writer: Option<csv::Writer<fs::File>>,
    header_written: bool,
}

impl LossLog {
    fn open(dir: Option<&Path>, resume_at: Option<u64>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                writer: None,
                header_written: false,
            });
        };
        fs::create_dir_all(dir)?;
        let path = dir.join(LOSS_LOG);
        let mut kept: Vec<csv::StringRecord> = Vec::new();
        let mut header = None;
        if let (Some(at), true) = (resume_at, path.is_file()) {
            let mut reader = csv::Reader::from_path(&path)?;
            header = Some(reader.headers()?.clone());
            for rec in reader.records() {
                let rec = rec?;
                if rec.get(0).and_then(|v| v.parse::<u64>().ok()).is_some_and(|i| i <= at) {
                    kept.push(rec);
                }
            }
        }
        let mut writer = csv::Writer::from_path(&path)?;
        let header_written = header.is_some();
        if let Some(h) = header {
            writer.write_record(&h)?;
            for rec in &kept {
                writer.write_record(rec)?;
            }
            writer.flush()?;
        }
        Ok(Self {
            writer: Some(writer),
            header_written,
        })
    }

    fn append(&mut self, row: &LogRow) -> Result<()> {
        let Some(w) = self.writer.as_mut() else {
            return Ok(());
        };
        if !self.header_written {
            let mut head = vec!["iteration".to_owned(), "total".to_owned()];
            head.extend(row.terms.iter().map(|(n, _)| (*n).to_owned()));
            w.write_record(&head)?;
            self.header_written = true;
        }
        let mut rec = vec![row.iteration.to_string(), row.total.to_string()];
        rec.extend(row.terms.iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

fn field(t: &Tensor) -> Field {
    t.to_field()
}

fn tensor(f: &Field) -> Tensor {
    Tensor::from_field(f)
}

fn decomposition_sample(
    net: &Network,
    low: &Field,
    high: &Field,
    weights: &DecompositionLossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let trace_low = net.forward(&[&tensor(low)])?;
    let trace_high = net.forward(&[&tensor(high)])?;
    let (r_low, l_low) = (field(trace_low.output(0)), field(trace_low.output(1)));
    let (r_high, l_high) = (field(trace_high.output(0)), field(trace_high.output(1)));
    let inputs = DecompositionInputs {
        image_low: low,
        image_high: high,
        reflectance_low: &r_low,
        reflectance_high: &r_high,
        illumination_low: &l_low,
        illumination_high: &l_high,
    };
    let (loss, g) = decomposition_loss_with_grad(&inputs, weights)?;
    let (mut grads, _) = net.backward(
        &trace_low,
        &[Some(tensor(&g.reflectance_low)), Some(tensor(&g.illumination_low)), None, None],
        false,
    );
    let (gh, _) = net.backward(
        &trace_high,
        &[Some(tensor(&g.reflectance_high)), Some(tensor(&g.illumination_high)), None, None],
        false,
    );
    grads.add(&gh);
    Ok((loss, grads))
}

fn restoration_sample(
    net: &Network,
    upstream: &Network,
    architecture: &ArchitectureOptions,
    low: &Field,
    high: &Field,
) -> Result<(LossBreakdown, Gradients)> {
    let d_low = decompose_tensor(upstream, &tensor(low))?;
    let d_high = decompose_tensor(upstream, &tensor(high))?;
    let trace = net.forward(&restoration_inputs(architecture.restoration_input, &d_low))?;
    let (loss, g, _) = restoration_loss_with_grad(&field(trace.output(0)), &field(&d_high.reflectance))?;
    let (grads, _) = net.backward(&trace, &[Some(tensor(&g))], false);
    Ok((loss, grads))
}

/// Source and target illumination for one adjustment sample.
pub fn adjustment_pair(
    upstream: &Network,
    low: &Field,
    high: &Field,
    low_to_high: bool,
) -> Result<(IlluminationMap, IlluminationMap)> {
    let l_low = decompose_tensor(upstream, &tensor(low))?.illumination_map()?;
    let l_high = decompose_tensor(upstream, &tensor(high))?.illumination_map()?;
    Ok(if low_to_high { (l_low, l_high) } else { (l_high, l_low) })
}

fn adjustment_sample(
    net: &Network,
    upstream: &Network,
    low: &Field,
    high: &Field,
    low_to_high: bool,
) -> Result<(LossBreakdown, Gradients)> {
    let (source, target) = adjustment_pair(upstream, low, high, low_to_high)?;
    let alpha = compute_ratio(&source, &target)?;
    let ratio = expand_ratio(alpha.get(), source.height(), source.width());
    let trace = net.forward(&[&tensor(&source), &tensor(&ratio)])?;
    let (loss, g, _) = adjustment_loss_with_grad(&field(trace.output(0)), &target)?;
    let (grads, _) = net.backward(&trace, &[Some(tensor(&g))], false);
    Ok((loss, grads))
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut out = parts[0].clone();
    out.total = parts.iter().map(|p| p.total).sum::<f64>() / n;
    for (i, term) in out.terms.iter_mut().enumerate() {
        term.1 = parts.iter().map(|p| p.terms[i].1).sum::<f64>() / n;
    }
    out
}

fn initial_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    if let (true, Some(dir)) = (config.resume, config.checkpoint_dir.as_deref()) {
        if checkpoint::exists(dir) {
            let ckpt = Checkpoint::load_stage(dir, config.stage)?;
            if ckpt.architecture != config.architecture || ckpt.seed != config.seed {
                return Err(Error::Config(format!(
                    "{} was trained with a different seed or architecture",
                    dir.display()
                )));
            }
            return Ok(ckpt);
        }
    }
    Checkpoint::initialize(config.stage, config.architecture, config.seed)
}

/// Runs `config.stage` to `config.iterations`. Restoration and adjustment
/// need the decomposition checkpoint as `upstream`; it is only read.
pub fn train(
    config: &TrainConfig,
    data: &PairSet,
    upstream: Option<&Checkpoint>,
    mut observer: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let upstream = match (config.stage, upstream) {
        (Stage::Decomposition, _) => None,
        (_, None) => {
            return Err(Error::Checkpoint(format!(
                "{} training needs a decomposition checkpoint",
                config.stage
            )))
        }
        (_, Some(u)) if u.stage != Stage::Decomposition => {
            return Err(Error::Checkpoint(format!(
                "upstream checkpoint is a {} checkpoint, expected decomposition",
                u.stage
            )))
        }
        (_, Some(u)) => Some(&u.network),
    };

    let mut ckpt = initial_checkpoint(config)?;
    let dir = config.checkpoint_dir.as_deref();
    let resumed_at = (ckpt.iteration > 0).then_some(ckpt.iteration);
    let mut log_file = LossLog::open(dir, resumed_at)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let (batch, patch) = (config.batch(), config.patch());
    let mut log = Vec::new();

    while ckpt.iteration < config.iterations {
        let it = ckpt.iteration;
        let patches = sample_patches(data, patch, batch, iteration_seed(config.seed, it, 0))?;
        let directions = adjustment_directions(config.seed, it, batch);
        let net = &ckpt.network;
        let results: Vec<(LossBreakdown, Gradients)> = pool.install(|| {
            (0..batch)
                .into_par_iter()
                .map(|i| {
                    let (low, high) = (&patches.low[i], &patches.high[i]);
                    match config.stage {
                        Stage::Decomposition => decomposition_sample(net, low, high, &config.loss),
                        Stage::Restoration => {
                            restoration_sample(net, upstream.expect("checked"), &config.architecture, low, high)
                        }
                        Stage::Adjustment => {
                            adjustment_sample(net, upstream.expect("checked"), low, high, directions[i])
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let losses: Vec<LossBreakdown> = results.iter().map(|(l, _)| l.clone()).collect();
        let mut grads = net.zero_gradients();
        for (_, g) in &results {
            grads.add(g);
        }
        grads.scale(1.0 / batch as f32);
        let loss = mean_breakdown(&losses);
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                iteration: it + 1,
                loss: loss.total,
            });
        }
        if config.clip_norm > 0.0 {
            grads.clip_global_norm(config.clip_norm);
        }
        ckpt.network.sgd_step(&grads, config.learning_rate as f32);
        ckpt.iteration = it + 1;

        let row = LogRow {
            iteration: ckpt.iteration,
            total: loss.total,
            terms: loss.terms,
        };
        if ckpt.iteration % config.log_every == 0 || ckpt.iteration == config.iterations {
            log_file.append(&row)?;
        }
        observer(&row);
        log.push(row);
        if let Some(dir) = dir {
            if config.checkpoint_every > 0 && ckpt.iteration % config.checkpoint_every == 0 {
                ckpt.save(dir)?;
            }
        }
    }
    if let Some(dir) = dir {
        ckpt.save(dir)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

pub fn train_decomposition(config: &TrainConfig, data: &PairSet) -> Result<TrainOutcome> {
    let config = TrainConfig {
        stage: Stage::Decomposition,
        ..config.clone()
    };
    train(&config, data, None, |_| {})
}

pub fn train_restoration(config: &TrainConfig, data: &PairSet, decomposition: &Checkpoint) -> Result<TrainOutcome> {
    let config = TrainConfig {
        stage: Stage::Restoration,
        ..config.clone()
    };
    train(&config, data, Some(decomposition), |_| {})
}

pub fn train_adjustment(config: &TrainConfig, data: &PairSet, decomposition: &Checkpoint) -> Result<TrainOutcome> {
    let config = TrainConfig {
        stage: Stage::Adjustment,
        ..config.clone()
    };
    train(&config, data, Some(decomposition), |_| {})
}

/// Mean of `total` over the first and last `fraction` of the log.
pub fn loss_trend(log: &[LogRow], fraction: f64) -> Option<(f64, f64)> {
    let k = ((log.len() as f64 * fraction).ceil() as usize).max(1);
    if log.len() < 2 * k {
        return None;
    }
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    Some((mean(&log[..k]), mean(&log[log.len() - k..])))
}
