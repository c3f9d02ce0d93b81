//! Synthetic observations `I = R ∘ L + E` with white Gaussian `E`, and the
//! illumination-decoupled degradation `Ẽ = E / L`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{product_broadcast, save_image, Field, IlluminationMap, Image, ReflectanceMap};
use crate::networks::RATIO_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Standard deviation of the additive noise, in image units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::OutOfRange(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self { noise_sigma, seed })
    }
}

/// I.i.d. `N(0, σ²)` samples in the given shape, deterministic in `seed`.
pub fn gaussian_noise(height: usize, width: usize, channels: usize, sigma: f64, seed: u64) -> Field {
    if sigma == 0.0 {
        return Field::zeros(height, width, channels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = (0..height * width * channels).map(|_| normal.sample(&mut rng)).collect();
    Field::from_vec(height, width, channels, data).expect("consistent shape")
}

/// `clip(R ∘ L + E)`; with zero noise this is exactly `recompose(R, L)`.
pub fn synthesize_observation(
    reflectance: &ReflectanceMap,
    illumination: &IlluminationMap,
    spec: &DegradationSpec,
) -> Result<Image> {
    reflectance.ensure_same_spatial(illumination)?;
    let mut out = product_broadcast(reflectance, illumination);
    if spec.noise_sigma > 0.0 {
        let (h, w, c) = out.shape();
        let noise = gaussian_noise(h, w, c, spec.noise_sigma, spec.seed);
        out.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    Image::new(out.clamp01())
}

/// `Ẽ = E / max(L, δ)`, broadcasting `L` over channels.
pub fn decoupled_degradation(noise: &Field, illumination: &IlluminationMap) -> Result<Field> {
    noise.ensure_same_spatial(illumination)?;
    let floored = illumination.map(|v| v.max(RATIO_FLOOR));
    let inverse = floored.map(|v| 1.0 / v);
    Ok(product_broadcast(noise, &inverse))
}

/// `Ẽ ∘ L`, the inverse of [`decoupled_degradation`] for `L ≥ δ`.
pub fn recouple(decoupled: &Field, illumination: &IlluminationMap) -> Result<Field> {
    decoupled.ensure_same_spatial(illumination)?;
    Ok(product_broadcast(decoupled, illumination))
}

/// Settings for a synthetic paired corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 4,
            height: 64,
            width: 64,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// One generated scene: shared reflectance, dark and bright illumination,
/// and the two observations. Only the low-light observation is noisy.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub id: String,
    pub reflectance: ReflectanceMap,
    pub illumination_low: IlluminationMap,
    pub illumination_high: IlluminationMap,
    pub low: Image,
    pub high: Image,
}

fn scene_reflectance(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ReflectanceMap {
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let freq: [f64; 3] = [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..4)
        .map(|_| {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let color = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            (y0, x0, (y0 + h / 3).min(h), (x0 + w / 3).min(w), color)
        })
        .collect();
    let field = Field::from_fn(h, w, 3, |y, x, c| {
        let inside = rects
            .iter()
            .rev()
            .find(|(y0, x0, y1, x1, _)| (*y0..*y1).contains(&y) && (*x0..*x1).contains(&x));
        match inside {
            Some(r) => r.4[c],
            None => base[c] + 0.15 * ((y as f64 * freq[c]).sin() * (x as f64 * freq[(c + 1) % 3]).cos()),
        }
    });
    ReflectanceMap::from_field_clamped(field).expect("three channels")
}

fn scene_illumination(h: usize, w: usize, level: f64, rng: &mut ChaCha8Rng) -> IlluminationMap {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let spread = (h.max(w) as f64) * rng.random_range(0.4..0.9);
    let field = Field::from_fn(h, w, 1, |y, x, _| {
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        level * (0.5 + 0.5 * (-d2 / (2.0 * spread * spread)).exp())
    });
    IlluminationMap::from_field_clamped(field).expect("one channel")
}

/// Deterministic scenes for `config`.
pub fn synthesize_pairs(config: &SynthConfig) -> Result<Vec<SyntheticPair>> {
    if config.pairs == 0 || config.height == 0 || config.width == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs at least one non-empty pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.pairs)
        .map(|i| {
            let (h, w) = (config.height, config.width);
            let reflectance = scene_reflectance(h, w, &mut rng);
            let low_level = rng.random_range(0.1..0.3);
            let high_level = rng.random_range(0.8..1.0);
            let illumination_low = scene_illumination(h, w, low_level, &mut rng);
            let illumination_high = scene_illumination(h, w, high_level, &mut rng);
            let noise_seed = rng.random();
            let low = synthesize_observation(
                &reflectance,
                &illumination_low,
                &DegradationSpec::new(config.noise_sigma, noise_seed)?,
            )?;
            let high = synthesize_observation(&reflectance, &illumination_high, &DegradationSpec::new(0.0, 0)?)?;
            Ok(SyntheticPair {
                id: format!("{:04}", i + 1),
                reflectance,
                illumination_low,
                illumination_high,
                low,
                high,
            })
        })
        .collect()
}

/// Writes `out/train/{low,high,reflectance,illumination}/<id>.png`, the
/// layout the dataset scanner reads. Illumination files hold the low-light
/// map as gray.
pub fn write_corpus(out: &Path, pairs: &[SyntheticPair]) -> Result<()> {
    let root = out.join("train");
    for sub in ["low", "high", "reflectance", "illumination"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for p in pairs {
        let name = format!("{}.png", p.id);
        save_image(&p.low, root.join("low").join(&name))?;
        save_image(&p.high, root.join("high").join(&name))?;
        save_image(&p.reflectance.to_image(), root.join("reflectance").join(&name))?;
        save_image(&p.illumination_low.to_image(), root.join("illumination").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::recompose;
    use proptest::prelude::*;

    fn variance(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn zero_noise_is_exact_recomposition() {
        let pairs = synthesize_pairs(&SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        for p in &pairs {
            let clean = recompose(&p.reflectance, &p.illumination_low).unwrap();
            assert_eq!(p.low, clean);
        }
    }

    #[test]
    fn noise_std_matches_sigma_on_mid_gray() {
        let r = ReflectanceMap::filled(256, 256, 1.0).unwrap();
        let l = IlluminationMap::filled(256, 256, 0.5).unwrap();
        let sigma = 0.05;
        let out = synthesize_observation(&r, &l, &DegradationSpec::new(sigma, 3).unwrap()).unwrap();
        let residual: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let std = variance(&residual).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn same_seed_same_output() {
        let r = ReflectanceMap::filled(16, 16, 0.7).unwrap();
        let l = IlluminationMap::filled(16, 16, 0.3).unwrap();
        let spec = DegradationSpec::new(0.1, 11).unwrap();
        assert_eq!(
            synthesize_observation(&r, &l, &spec).unwrap(),
            synthesize_observation(&r, &l, &spec).unwrap()
        );
        let other = DegradationSpec::new(0.1, 12).unwrap();
        assert_ne!(
            synthesize_observation(&r, &l, &spec).unwrap(),
            synthesize_observation(&r, &l, &other).unwrap()
        );
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(DegradationSpec::new(-0.1, 0).is_err());
        assert!(DegradationSpec::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn decoupled_examples() {
        let l = IlluminationMap::filled(4, 4, 0.25).unwrap();
        let zero = Field::zeros(4, 4, 3);
        assert_eq!(decoupled_degradation(&zero, &l).unwrap(), zero);
        let e = gaussian_noise(4, 4, 3, 0.1, 1);
        let ones = IlluminationMap::filled(4, 4, 1.0).unwrap();
        assert_eq!(decoupled_degradation(&e, &ones).unwrap(), e);
    }

    #[test]
    fn decoupled_variance_scales_by_inverse_square() {
        let sigma = 0.05;
        let e = gaussian_noise(512, 512, 1, sigma, 9);
        let l = IlluminationMap::filled(512, 512, 0.5).unwrap();
        let et = decoupled_degradation(&e, &l).unwrap();
        let v = variance(et.data());
        assert!((v / (4.0 * sigma * sigma) - 1.0).abs() < 0.05, "variance {v}");
    }

    #[test]
    fn corpus_layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthesize_pairs(&SynthConfig {
            pairs: 2,
            height: 8,
            width: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        write_corpus(dir.path(), &pairs).unwrap();
        for sub in ["low", "high", "reflectance", "illumination"] {
            assert!(dir.path().join("train").join(sub).join("0002.png").is_file());
        }
    }

    proptest! {
        #[test]
        fn recouple_inverts_decouple(
            values in proptest::collection::vec(-0.3f64..0.3, 24),
            light in proptest::collection::vec(1e-4f64..1.0, 8),
        ) {
            let e = Field::from_vec(2, 4, 3, values).unwrap();
            let l = IlluminationMap::new(Field::from_vec(2, 4, 1, light).unwrap()).unwrap();
            let back = recouple(&decoupled_degradation(&e, &l).unwrap(), &l).unwrap();
            for (a, b) in back.data().iter().zip(e.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn synthesis_is_deterministic(seed in any::<u64>(), sigma in 0.0f64..0.2) {
            let r = ReflectanceMap::filled(6, 5, 0.6).unwrap();
            let l = IlluminationMap::filled(6, 5, 0.4).unwrap();
            let spec = DegradationSpec::new(sigma, seed).unwrap();
            prop_assert_eq!(
                synthesize_observation(&r, &l, &spec).unwrap(),
                synthesize_observation(&r, &l, &spec).unwrap()
            );
        }
    }
}
