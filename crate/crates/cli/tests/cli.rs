use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use lowlight::degradation::{synthesize_pairs, SynthConfig};
use lowlight::imaging::{encode_png, load_image, probe_dimensions, recompose};
use lowlight::pipeline::EnhancerBundle;
use proptest::prelude::*;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowlight")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, sigma: &str) {
    let out = run(&["synth", "--out", s(dir), "--pairs", "2", "--height", "32", "--width", "40", "--sigma", sigma, "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn init(dir: &Path) {
    assert_eq!(code(&run(&["init", "--out", s(dir), "--seed", "2"])), 0);
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train", "--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["enhance", "--alpha", "2"])), 1);
    assert_eq!(code(&run(&[])), 1);
}

#[test]
fn noiseless_synthesis_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "0");
    let pairs = synthesize_pairs(&SynthConfig {
        pairs: 2,
        height: 32,
        width: 40,
        noise_sigma: 0.0,
        seed: 4,
    })
    .unwrap();
    for p in &pairs {
        let expected = encode_png(&recompose(&p.reflectance, &p.illumination_low).unwrap()).unwrap();
        let written = fs::read(tmp.path().join("train/low").join(format!("{}.png", p.id))).unwrap();
        assert_eq!(written, expected, "{}", p.id);
    }
}

#[test]
fn training_writes_checkpoints_and_needs_its_upstream() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("bundle");
    synth(&data, "0.02");
    let train = |stage: &str| {
        run(&["train", "--stage", stage, "--data", s(&data), "--out", s(&out), "--iterations", "2", "--batch", "2", "--patch", "16", "-q"])
    };

    let restore_first = train("restore");
    assert_eq!(code(&restore_first), 1);
    assert!(String::from_utf8_lossy(&restore_first.stderr).contains("decomposition"));

    assert_eq!(code(&train("decom")), 0);
    assert!(out.join("decomposition/manifest.toml").is_file());
    let csv = fs::read_to_string(out.join("decomposition/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(code(&train("restore")), 0);
    assert!(out.join("restoration/manifest.toml").is_file());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "0.02");
    let config = tmp.path().join("train.toml");
    fs::write(&config, "iterations = 3\nbatch = 2\npatch = 16\n").unwrap();

    let from_file = tmp.path().join("a");
    let out = run(&["train", "--stage", "decom", "--data", s(&data), "--out", s(&from_file), "--config", s(&config), "-q"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(from_file.join("decomposition/loss.csv")).unwrap().lines().count(), 4);

    let flagged = tmp.path().join("b");
    let out = run(&[
        "train", "--stage", "decom", "--data", s(&data), "--out", s(&flagged), "--config", s(&config), "--iterations", "1", "-q",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(flagged.join("decomposition/loss.csv")).unwrap().lines().count(), 2);

    fs::write(&config, "iterations = 3\nlearning_rat = 0.1\n").unwrap();
    let out = run(&["train", "--stage", "decom", "--data", s(&data), "--out", s(&flagged), "--config", s(&config), "-q"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn enhance_is_deterministic_and_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let bundle = tmp.path().join("bundle");
    synth(&data, "0.02");
    init(&bundle);
    let input = data.join("train/low/0001.png");
    let enhance = |name: &str, alpha: &str| {
        let output = tmp.path().join(name);
        let out = run(&["enhance", "--input", s(&input), "--alpha", alpha, "--bundle", s(&bundle), "--output", s(&output)]);
        (code(&out), fs::read(&output).ok())
    };

    let (c1, first) = enhance("a.png", "2.5");
    let (c2, second) = enhance("b.png", "2.5");
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(first, second);

    let lib = EnhancerBundle::load(&bundle).unwrap();
    let image = load_image(&input).unwrap();
    let expected = encode_png(&lib.enhance(&image, 2.5).unwrap().image).unwrap();
    assert_eq!(first.unwrap(), expected);

    assert_eq!(enhance("zero.png", "0"), (1, None));
    assert_eq!(enhance("big.png", "10.5").0, 1);
    let missing = run(&["enhance", "--input", s(&input), "--alpha", "2", "--bundle", s(&tmp.path().join("nope")), "--output", "x.png"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn enhance_directory_and_decompose_layers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let bundle = tmp.path().join("bundle");
    synth(&data, "0.02");
    init(&bundle);
    let low = data.join("train/low");

    let out_dir = tmp.path().join("enhanced");
    let layers = tmp.path().join("layers");
    let out = run(&["enhance", "--input", s(&low), "--alpha", "3", "--bundle", s(&bundle), "--output", s(&out_dir), "--layers", s(&layers)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for id in ["0001", "0002"] {
        assert!(out_dir.join(format!("{id}.png")).is_file());
        assert!(layers.join(format!("{id}_reflectance.png")).is_file());
    }

    let decomposed = tmp.path().join("decomposed");
    let out = run(&["decompose", "--input", s(&low.join("0002.png")), "--bundle", s(&bundle), "--out", s(&decomposed)]);
    assert_eq!(code(&out), 0);
    for layer in ["reflectance", "illumination"] {
        let bytes = fs::read(decomposed.join(format!("0002_{layer}.png"))).unwrap();
        assert_eq!(probe_dimensions(&bytes).unwrap(), (40, 32), "{layer}");
    }
}

#[test]
fn eval_of_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "0.02");
    let high = tmp.path().join("train/high");
    let csv = tmp.path().join("report/metrics.csv");
    let out = run(&["eval", "--enhanced", s(&high), "--reference", s(&high), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut rows = text.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let psnr = header.iter().position(|h| *h == "psnr").unwrap();
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row.split(',').nth(psnr).unwrap().parse::<f64>().unwrap(), 100.0, "{row}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr"));

    let missing = run(&["eval", "--enhanced", s(&tmp.path().join("none")), "--reference", s(&high), "--out", s(&csv)]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn serve_answers_health_on_an_ephemeral_port() {
    let tmp = tempfile::tempdir().unwrap();
    init(tmp.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_lowlight"))
        .args(["serve", "--port", "0", "--bundle", s(tmp.path())])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let response = reqwest::blocking::get(format!("{url}/api/health"));
    child.kill().unwrap();
    child.wait().unwrap();
    let response = response.unwrap();
    assert_eq!(response.status().as_u16(), 200);
    let body: serde_json::Value = response.json().unwrap();
    assert_eq!(body["status"], "ready");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn out_of_range_alpha_is_a_usage_error(alpha in prop_oneof![-100.0f64..=0.0, 10.0001f64..1e6]) {
        let out = run(&["enhance", "--input", "in.png", "--alpha", &alpha.to_string(), "--bundle", "b", "--output", "o.png"]);
        prop_assert_eq!(code(&out), 1);
        prop_assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    }
}
