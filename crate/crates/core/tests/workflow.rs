use std::fs;

use lowlight::checkpoint::{self, Checkpoint};
use lowlight::dataset::{PairSet, Split};
use lowlight::degradation::{synthesize_pairs, write_corpus, SynthConfig};
use lowlight::imaging::{encode_png, load_image, save_image};
use lowlight::metrics::{evaluate_corpus, EvalConfig};
use lowlight::networks::Stage;
use lowlight::pipeline::EnhancerBundle;
use lowlight::trainer::{train, TrainConfig, LOSS_LOG};

fn corpus(dir: &std::path::Path) -> PairSet {
    let pairs = synthesize_pairs(&SynthConfig {
        pairs: 2,
        height: 32,
        width: 40,
        noise_sigma: 0.02,
        seed: 11,
    })
    .unwrap();
    write_corpus(dir, &pairs).unwrap();
    let (set, report) = PairSet::open(dir, Split::Train).unwrap();
    assert!(report.unmatched.is_empty());
    set
}

fn quick(stage: Stage, dir: &std::path::Path, iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: Some(2),
        patch: Some(16),
        learning_rate: 1e-3,
        checkpoint_dir: Some(dir.join(stage.as_str())),
        ..TrainConfig::for_stage(stage)
    }
}

#[test]
fn synthesize_train_enhance_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(&tmp.path().join("corpus"));
    let bundle_dir = tmp.path().join("bundle");

    let decom = train(&quick(Stage::Decomposition, &bundle_dir, 3), &data, None, |_| {}).unwrap();
    train(&quick(Stage::Restoration, &bundle_dir, 2), &data, Some(&decom.checkpoint), |_| {}).unwrap();
    train(&quick(Stage::Adjustment, &bundle_dir, 2), &data, Some(&decom.checkpoint), |_| {}).unwrap();
    for stage in Stage::ALL {
        assert!(checkpoint::exists(&bundle_dir.join(stage.as_str())), "{stage}");
        let csv = fs::read_to_string(bundle_dir.join(stage.as_str()).join(LOSS_LOG)).unwrap();
        assert_eq!(csv.lines().count(), 1 + if stage == Stage::Decomposition { 3 } else { 2 });
    }

    let bundle = EnhancerBundle::load(&bundle_dir).unwrap();
    assert!(!bundle.is_degraded());
    let out_dir = tmp.path().join("enhanced");
    fs::create_dir_all(&out_dir).unwrap();
    for pair in &data.pairs {
        let out = bundle.enhance(&pair.low, 2.0).unwrap();
        assert_eq!(out.image.shape(), pair.low.shape());
        save_image(&out.image, out_dir.join(format!("{}.png", pair.id))).unwrap();
    }
    let report = evaluate_corpus(
        &out_dir,
        &tmp.path().join("corpus/train/high"),
        &EvalConfig {
            input_dir: Some(tmp.path().join("corpus/train/low")),
            ..EvalConfig::default()
        },
    )
    .unwrap();
    assert_eq!(report.count(), 2);
    assert_eq!(report.columns, ["psnr", "ssim", "loe_ref", "loe"]);
    for c in &report.columns {
        assert!(report.mean(c).unwrap().is_finite(), "{c}");
    }
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(&tmp.path().join("corpus"));

    let straight = train(&quick(Stage::Decomposition, &tmp.path().join("a"), 6), &data, None, |_| {}).unwrap();

    let dir = tmp.path().join("b");
    train(&quick(Stage::Decomposition, &dir, 3), &data, None, |_| {}).unwrap();
    let resumed = train(
        &TrainConfig {
            resume: true,
            ..quick(Stage::Decomposition, &dir, 6)
        },
        &data,
        None,
        |_| {},
    )
    .unwrap();
    assert_eq!(resumed.checkpoint.iteration, 6);
    assert_eq!(
        resumed.checkpoint.network.fingerprint(),
        straight.checkpoint.network.fingerprint()
    );
    let on_disk = Checkpoint::load(&dir.join("decomposition")).unwrap();
    assert_eq!(on_disk.network.fingerprint(), straight.checkpoint.network.fingerprint());
    assert_eq!(
        fs::read(dir.join("decomposition").join(LOSS_LOG)).unwrap(),
        fs::read(tmp.path().join("a/decomposition").join(LOSS_LOG)).unwrap()
    );
}

#[test]
fn png_round_trip_feeds_the_pipeline_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = corpus(&tmp.path().join("corpus"));
    let bundle = EnhancerBundle::initialized(Default::default(), 3).unwrap();
    let path = tmp.path().join("corpus/train/low/0001.png");
    let from_disk = load_image(&path).unwrap();
    assert_eq!(encode_png(&from_disk).unwrap(), fs::read(&path).unwrap());
    assert_eq!(from_disk, data.pairs[0].low);
    let a = encode_png(&bundle.enhance(&from_disk, 1.7).unwrap().image).unwrap();
    let b = encode_png(&bundle.enhance(&data.pairs[0].low, 1.7).unwrap().image).unwrap();
    assert_eq!(a, b);
}
