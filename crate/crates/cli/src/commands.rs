use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use lowlight::checkpoint::{self, Checkpoint};
use lowlight::dataset::{scan_pairs, PairSet, Split};
use lowlight::degradation::{synthesize_pairs, write_corpus, SynthConfig};
use lowlight::imaging::{encode_png, load_image};
use lowlight::metrics::{evaluate_corpus, EvalConfig, NiqePlugin};
use lowlight::networks::{ArchitectureOptions, Stage};
use lowlight::pipeline::{validate_alpha, EnhancerBundle};
use lowlight::trainer::{self, TrainConfig};
use lowlight_service::ServiceConfig;

use crate::args::{DecomposeArgs, EnhanceArgs, EvalArgs, InitArgs, ServeArgs, SynthArgs, TrainArgs};
use crate::error::{CliError, CliResult};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Config file values, then flags on top.
pub fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_toml_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.stage = args.stage;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = Some(v);
    }
    if let Some(v) = args.patch {
        cfg.patch = Some(v);
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    cfg.resume |= args.resume;
    cfg.checkpoint_dir = Some(args.out.join(args.stage.as_str()));
    cfg.validate()?;
    Ok(cfg)
}

fn open_training_data(dir: &Path) -> CliResult<PairSet> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("data directory {} does not exist", dir.display())));
    }
    let (set, report) = if dir.join("low").is_dir() {
        let report = scan_pairs(dir)?;
        (PairSet::load(&report.pairs)?, report)
    } else {
        PairSet::open(dir, Split::Train)?
    };
    for w in report.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(set)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(args)?;
    let upstream = match args.stage {
        Stage::Decomposition => None,
        stage => {
            let dir = args
                .decomposition
                .clone()
                .unwrap_or_else(|| args.out.join(Stage::Decomposition.as_str()));
            if !checkpoint::exists(&dir) {
                return Err(CliError::Usage(format!(
                    "{stage} training needs a decomposition checkpoint, none found at {}",
                    dir.display()
                )));
            }
            Some(Checkpoint::load_stage(&dir, Stage::Decomposition)?)
        }
    };
    let data = open_training_data(&args.data)?;
    let log_every = cfg.log_every;
    let outcome = trainer::train(&cfg, &data, upstream.as_ref(), |row| {
        if !args.quiet && row.iteration % log_every == 0 {
            eprintln!("iteration {} loss {:.6}", row.iteration, row.total);
        }
    })?;
    let dir = cfg.checkpoint_dir.as_deref().unwrap_or(&args.out);
    match outcome.log.last() {
        Some(row) => println!(
            "{} trained to iteration {} (loss {:.6}); checkpoint in {}",
            cfg.stage,
            outcome.checkpoint.iteration,
            row.total,
            dir.display()
        ),
        None => println!(
            "{} already at iteration {}; checkpoint in {}",
            cfg.stage,
            outcome.checkpoint.iteration,
            dir.display()
        ),
    }
    Ok(())
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG or JPEG files in {}", dir.display())));
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require_png(path: &Path) -> CliResult<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => Ok(()),
        _ => Err(CliError::Usage(format!("output {} must be a .png file", path.display()))),
    }
}

fn write_layers(
    dir: &Path,
    name: &str,
    reflectance: &lowlight::imaging::ReflectanceMap,
    illumination: &lowlight::imaging::IlluminationMap,
) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}_reflectance.png")), encode_png(&reflectance.to_image())?)?;
    fs::write(dir.join(format!("{name}_illumination.png")), encode_png(&illumination.to_image())?)?;
    Ok(())
}

fn enhance_one(bundle: &EnhancerBundle, input: &Path, output: &Path, alpha: f64, layers: Option<&Path>) -> CliResult<()> {
    let image = load_image(input)?;
    let out = bundle.enhance(&image, alpha)?;
    fs::write(output, encode_png(&out.image)?)?;
    if let Some(dir) = layers {
        write_layers(dir, &stem(input), &out.reflectance, &out.illumination)?;
    }
    Ok(())
}

pub fn enhance(args: &EnhanceArgs) -> CliResult<()> {
    validate_alpha(args.alpha)?;
    if !args.input.exists() {
        return Err(CliError::Usage(format!("input {} does not exist", args.input.display())));
    }
    let bundle = load_bundle(&args.bundle)?;
    if bundle.is_degraded() {
        eprintln!("warning: bundle is incomplete; missing stages use their fallbacks");
    }
    let layers = args.layers.as_deref();
    if args.input.is_dir() {
        fs::create_dir_all(&args.output)?;
        let files = image_files(&args.input)?;
        for f in &files {
            enhance_one(&bundle, f, &args.output.join(format!("{}.png", stem(f))), args.alpha, layers)?;
        }
        println!("enhanced {} images into {}", files.len(), args.output.display());
    } else {
        require_png(&args.output)?;
        if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        enhance_one(&bundle, &args.input, &args.output, args.alpha, layers)?;
        println!("wrote {}", args.output.display());
    }
    Ok(())
}

fn load_bundle(dir: &Path) -> CliResult<EnhancerBundle> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("bundle directory {} does not exist", dir.display())));
    }
    Ok(EnhancerBundle::load(dir)?)
}

pub fn decompose(args: &DecomposeArgs) -> CliResult<()> {
    let bundle = load_bundle(&args.bundle)?;
    let inputs = if args.input.is_dir() {
        image_files(&args.input)?
    } else {
        vec![args.input.clone()]
    };
    for input in &inputs {
        let (r, l) = bundle.decompose(&load_image(input)?)?;
        write_layers(&args.out, &stem(input), &r, &l)?;
    }
    println!("decomposed {} images into {}", inputs.len(), args.out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let config = EvalConfig {
        loe_grid: args.loe_grid,
        niqe: args.niqe.as_deref().map(NiqePlugin::parse).transpose()?,
        input_dir: args.input.clone(),
    };
    let report = evaluate_corpus(&args.enhanced, &args.reference, &config)?;
    for p in &report.skipped {
        eprintln!("warning: skipped {}", p.display());
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report.write_csv(&args.out)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let pairs = synthesize_pairs(&SynthConfig {
        pairs: args.pairs,
        height: args.height,
        width: args.width,
        noise_sigma: args.sigma,
        seed: args.seed,
    })?;
    write_corpus(&args.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.join("train").display());
    Ok(())
}

pub fn init(args: &InitArgs) -> CliResult<()> {
    EnhancerBundle::initialized(ArchitectureOptions::default(), args.seed)?.save(&args.out)?;
    println!("wrote untrained bundle to {}", args.out.display());
    Ok(())
}

pub fn serve(args: &ServeArgs) -> CliResult<()> {
    let bundle = args.bundle.as_deref().map(load_bundle).transpose()?;
    if bundle.is_none() {
        eprintln!("warning: no bundle given; /api/enhance will answer 503");
    }
    let config = ServiceConfig {
        max_pixels: args.max_pixels,
        static_dir: args.static_dir.clone(),
        ..ServiceConfig::default()
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let (listener, addr) = lowlight_service::bind(SocketAddr::new(args.host, args.port)).await?;
        println!("listening on http://{addr}");
        lowlight_service::serve(listener, lowlight_service::router(bundle, &config)).await
    })?;
    Ok(())
}
