//! The decomposition, restoration and adjustment networks, plus the scalar
//! light-ratio helpers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Field, IlluminationMap, Image, ReflectanceMap};
use crate::nn::{LayerSpec as L, Network, NetworkSpec, Tensor};

/// Floor applied to illumination before division or logarithms.
pub const RATIO_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Decomposition,
    Restoration,
    Adjustment,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Decomposition, Stage::Restoration, Stage::Adjustment];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Decomposition => "decomposition",
            Stage::Restoration => "restoration",
            Stage::Adjustment => "adjustment",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decomposition" | "decom" => Ok(Stage::Decomposition),
            "restoration" | "restore" => Ok(Stage::Restoration),
            "adjustment" | "adjust" => Ok(Stage::Adjustment),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage {other:?} (expected decom, restore or adjust)"
            ))),
        }
    }
}

/// What the restoration network consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestorationInput {
    /// Decomposed reflectance and illumination, 4 channels.
    #[default]
    ReflectanceIllumination,
    /// Pre-activation illumination plus the 32 reflectance-branch features,
    /// 33 channels.
    DecompositionFeatures,
}

impl RestorationInput {
    pub fn channels(self) -> usize {
        match self {
            RestorationInput::ReflectanceIllumination => 4,
            RestorationInput::DecompositionFeatures => 33,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureOptions {
    pub restoration_input: RestorationInput,
    /// Width of `RE_conv9_2`.
    pub restoration_conv9_2_channels: usize,
}

impl Default for ArchitectureOptions {
    fn default() -> Self {
        Self {
            restoration_input: RestorationInput::default(),
            restoration_conv9_2_channels: 32,
        }
    }
}

impl ArchitectureOptions {
    pub fn validate(&self) -> Result<()> {
        if self.restoration_conv9_2_channels == 0 {
            return Err(Error::Config("restoration_conv9_2_channels must be positive".into()));
        }
        Ok(())
    }
}

pub fn decomposition_spec() -> NetworkSpec {
    NetworkSpec {
        inputs: vec![("RGB".into(), 3)],
        layers: vec![
            L::conv_relu("Decom_conv1", "RGB", 32),
            L::max_pool("Decom_pool1", "Decom_conv1", 32),
            L::conv_relu("Decom_conv2", "Decom_pool1", 64),
            L::max_pool("Decom_pool2", "Decom_conv2", 64),
            L::conv_relu("Decom_conv3", "Decom_pool2", 128),
            L::deconv("Decom_up1", "Decom_conv3", 64),
            L::concat("Decom_concat1", &["Decom_up1", "Decom_conv2"], 128),
            L::conv_relu("Decom_conv4", "Decom_concat1", 64),
            L::deconv("Decom_up2", "Decom_conv4", 32),
            L::concat("Decom_concat2", &["Decom_up2", "Decom_conv1"], 64),
            L::conv_relu("Decom_conv5", "Decom_concat2", 32),
            L::conv("Decom_conv6", "Decom_conv5", 3),
            L::sigmoid("Decom_Reflectance", "Decom_conv6", 3),
            L::conv_relu("Decom_i_conv1", "Decom_conv1", 32),
            L::concat("Decom_i_conv2", &["Decom_i_conv1", "Decom_conv5"], 64),
            L::conv("Decom_i_conv3", "Decom_i_conv2", 1),
            L::sigmoid("Decom_Illumination", "Decom_i_conv3", 1),
        ],
        outputs: vec![
            "Decom_Reflectance".into(),
            "Decom_Illumination".into(),
            "Decom_i_conv3".into(),
            "Decom_conv5".into(),
        ],
    }
}

pub fn restoration_spec(options: &ArchitectureOptions) -> NetworkSpec {
    let (inputs, concat_inputs) = match options.restoration_input {
        RestorationInput::ReflectanceIllumination => (
            vec![("Decom_Reflectance".to_owned(), 3), ("Decom_Illumination".to_owned(), 1)],
            ["Decom_Reflectance", "Decom_Illumination"],
        ),
        RestorationInput::DecompositionFeatures => (
            vec![("Decom_i_conv3".to_owned(), 1), ("Decom_conv5".to_owned(), 32)],
            ["Decom_i_conv3", "Decom_conv5"],
        ),
    };
    let c92 = options.restoration_conv9_2_channels;
    NetworkSpec {
        inputs,
        layers: vec![
            L::concat("RE_concat1", &concat_inputs, options.restoration_input.channels()),
            L::conv_relu("RE_conv1_1", "RE_concat1", 32),
            L::conv_relu("RE_conv1_2", "RE_conv1_1", 32),
            L::max_pool("RE_pool1", "RE_conv1_2", 32),
            L::conv_relu("RE_conv2_1", "RE_pool1", 64),
            L::conv_relu("RE_conv2_2", "RE_conv2_1", 64),
            L::max_pool("RE_pool2", "RE_conv2_2", 64),
            L::conv_relu("RE_conv3_1", "RE_pool2", 128),
            L::conv_relu("RE_conv3_2", "RE_conv3_1", 128),
            L::max_pool("RE_pool3", "RE_conv3_2", 128),
            L::conv_relu("RE_conv4_1", "RE_pool3", 256),
            L::conv_relu("RE_conv4_2", "RE_conv4_1", 256),
            L::max_pool("RE_pool4", "RE_conv4_2", 256),
            L::conv_relu("RE_conv5_1", "RE_pool4", 512),
            L::conv_relu("RE_conv5_2", "RE_conv5_1", 512),
            L::deconv("RE_up1", "RE_conv5_2", 256),
            L::concat("RE_concat2", &["RE_up1", "RE_conv4_2"], 512),
            L::conv_relu("RE_conv6_1", "RE_concat2", 256),
            L::conv_relu("RE_conv6_2", "RE_conv6_1", 256),
            L::deconv("RE_up2", "RE_conv6_2", 128),
            L::concat("RE_concat3", &["RE_up2", "RE_conv3_2"], 256),
            L::conv_relu("RE_conv7_1", "RE_concat3", 128),
            L::conv_relu("RE_conv7_2", "RE_conv7_1", 128),
            L::deconv("RE_up3", "RE_conv7_2", 64),
            L::concat("RE_concat4", &["RE_up3", "RE_conv2_2"], 128),
            L::conv_relu("RE_conv8_1", "RE_concat4", 64),
            L::conv_relu("RE_conv8_2", "RE_conv8_1", 64),
            L::deconv("RE_up4", "RE_conv8_2", 32),
            L::concat("RE_concat5", &["RE_up4", "RE_conv1_2"], 64),
            L::conv_relu("RE_conv9_1", "RE_concat5", 32),
            L::conv_relu("RE_conv9_2", "RE_conv9_1", c92),
            L::conv("RE_conv10", "RE_conv9_2", 3),
            L::sigmoid("RE_refletance", "RE_conv10", 3),
        ],
        outputs: vec!["RE_refletance".into()],
    }
}

pub fn adjustment_spec() -> NetworkSpec {
    NetworkSpec {
        inputs: vec![("Decom_illumination".into(), 1), ("Ratio".into(), 1)],
        layers: vec![
            L::concat("Adjust_concat1", &["Decom_illumination", "Ratio"], 2),
            L::conv_relu("Adjust_conv1", "Adjust_concat1", 32),
            L::conv_relu("Adjust_conv2", "Adjust_conv1", 32),
            L::conv_relu("Adjust_conv3", "Adjust_conv2", 32),
            L::conv("Adjust_conv4", "Adjust_conv3", 1),
            L::sigmoid("Adjust_illumination", "Adjust_conv4", 1),
        ],
        outputs: vec!["Adjust_illumination".into()],
    }
}

pub fn spec_for(stage: Stage, options: &ArchitectureOptions) -> NetworkSpec {
    match stage {
        Stage::Decomposition => decomposition_spec(),
        Stage::Restoration => restoration_spec(options),
        Stage::Adjustment => adjustment_spec(),
    }
}

/// Freshly initialized network for `stage`.
pub fn build(stage: Stage, options: &ArchitectureOptions, seed: u64) -> Result<Network> {
    options.validate()?;
    Network::new(spec_for(stage, options), seed)
}

fn padded_tensor(field: &Field, multiple: usize) -> Tensor {
    Tensor::from_field(&field.reflect_pad_multiple(multiple))
}

fn cropped(t: &Tensor, h: usize, w: usize) -> Field {
    t.to_field().crop(h, w)
}

/// Decomposition outputs at tensor level.
#[derive(Clone, Debug)]
pub struct Decomposed {
    pub reflectance: Tensor,
    pub illumination: Tensor,
    /// `Decom_i_conv3`, before the sigmoid.
    pub illumination_logits: Tensor,
    /// `Decom_conv5`.
    pub features: Tensor,
}

impl Decomposed {
    pub fn from_outputs(mut outputs: Vec<Tensor>) -> Self {
        let features = outputs.pop().expect("four outputs");
        let illumination_logits = outputs.pop().expect("four outputs");
        let illumination = outputs.pop().expect("four outputs");
        let reflectance = outputs.pop().expect("four outputs");
        Self {
            reflectance,
            illumination,
            illumination_logits,
            features,
        }
    }

    pub fn reflectance_map(&self) -> Result<ReflectanceMap> {
        ReflectanceMap::from_field_clamped(self.reflectance.to_field())
    }

    pub fn illumination_map(&self) -> Result<IlluminationMap> {
        IlluminationMap::from_field_clamped(self.illumination.to_field())
    }
}

/// Runs the decomposition network on an input whose sides are already a
/// multiple of 4.
pub fn decompose_tensor(net: &Network, image: &Tensor) -> Result<Decomposed> {
    Ok(Decomposed::from_outputs(net.infer(&[image])?))
}

/// Splits an image into reflectance and illumination, padding as needed.
pub fn decompose(net: &Network, image: &Image) -> Result<(ReflectanceMap, IlluminationMap)> {
    let (h, w) = (image.height(), image.width());
    let d = decompose_tensor(net, &padded_tensor(image, net.required_multiple()))?;
    Ok((
        ReflectanceMap::from_field_clamped(cropped(&d.reflectance, h, w))?,
        IlluminationMap::from_field_clamped(cropped(&d.illumination, h, w))?,
    ))
}

/// Restoration network inputs for the configured wiring.
pub fn restoration_inputs(wiring: RestorationInput, d: &Decomposed) -> [&Tensor; 2] {
    match wiring {
        RestorationInput::ReflectanceIllumination => [&d.reflectance, &d.illumination],
        RestorationInput::DecompositionFeatures => [&d.illumination_logits, &d.features],
    }
}

/// Runs the restoration network on a decomposition of the same padded size.
pub fn restore_tensor(net: &Network, wiring: RestorationInput, d: &Decomposed) -> Result<Tensor> {
    Ok(net.infer(&restoration_inputs(wiring, d))?.remove(0))
}

/// A positive light ratio; above 1 brightens.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AdjustmentRatio(f64);

impl AdjustmentRatio {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::OutOfRange(format!("ratio must be positive and finite, got {alpha}")));
        }
        Ok(Self(alpha))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for AdjustmentRatio {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AdjustmentRatio> for f64 {
    fn from(r: AdjustmentRatio) -> f64 {
        r.0
    }
}

/// Constant single-channel `h × w` map of `alpha`.
pub fn expand_ratio(alpha: f64, height: usize, width: usize) -> Field {
    Field::filled(height, width, 1, alpha)
}

/// Mean of `target / max(source, δ)` over all pixels.
pub fn compute_ratio(source: &IlluminationMap, target: &IlluminationMap) -> Result<AdjustmentRatio> {
    source.ensure_same_shape(target)?;
    let n = source.len() as f64;
    let sum: f64 = source
        .data()
        .iter()
        .zip(target.data())
        .map(|(s, t)| t / s.max(RATIO_FLOOR))
        .sum();
    let alpha = sum / n;
    // an all-zero target yields 0; keep the ratio strictly positive
    AdjustmentRatio::new(alpha.max(f64::MIN_POSITIVE))
}

/// Gamma exponent giving the same overall light strength as `adjusted`:
/// `‖log L̂‖₁ / ‖log L_s‖₁`.
pub fn gamma_equivalent(adjusted: &IlluminationMap, source: &IlluminationMap) -> Result<f64> {
    adjusted.ensure_same_shape(source)?;
    let l1 = |m: &IlluminationMap| m.data().iter().map(|v| v.max(RATIO_FLOOR).ln().abs()).sum::<f64>();
    let den = l1(source);
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "source illumination is identically 1; gamma is undefined".into(),
        ));
    }
    Ok(l1(adjusted) / den)
}

/// Maps `illumination` towards the light level `alpha` times brighter.
pub fn adjust(net: &Network, illumination: &IlluminationMap, alpha: AdjustmentRatio) -> Result<IlluminationMap> {
    let (h, w) = (illumination.height(), illumination.width());
    let l = Tensor::from_field(illumination);
    let ratio = Tensor::from_field(&expand_ratio(alpha.get(), h, w));
    let out = net.infer(&[&l, &ratio])?.remove(0);
    IlluminationMap::from_field_clamped(out.to_field())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn illumination(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> IlluminationMap {
        IlluminationMap::new(Field::from_fn(h, w, 1, |y, x, _| f(y, x))).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Image {
        Image::new(Field::from_fn(h, w, 3, |y, x, c| {
            let v = ((y * 31 + x * 17 + c * 7) as u64 ^ seed) % 97;
            v as f64 / 96.0
        }))
        .unwrap()
    }

    #[test]
    fn parameter_counts_match_layer_tables() {
        let opts = ArchitectureOptions::default();
        assert_eq!(build(Stage::Decomposition, &opts, 0).unwrap().parameter_count(), 237_252);
        assert_eq!(build(Stage::Restoration, &opts, 0).unwrap().parameter_count(), 7_761_219);
        assert_eq!(build(Stage::Adjustment, &opts, 0).unwrap().parameter_count(), 19_393);
        let literal = ArchitectureOptions {
            restoration_input: RestorationInput::DecompositionFeatures,
            restoration_conv9_2_channels: 256,
        };
        assert_eq!(build(Stage::Restoration, &literal, 0).unwrap().parameter_count(), 7_840_355);
    }

    #[test]
    fn layer_names_follow_tables() {
        let names = |s: NetworkSpec| s.layers.into_iter().map(|l| l.name).collect::<Vec<_>>();
        let d = names(decomposition_spec());
        assert_eq!(d.first().unwrap(), "Decom_conv1");
        assert_eq!(d.last().unwrap(), "Decom_Illumination");
        assert_eq!(d.len(), 17);
        assert_eq!(names(restoration_spec(&ArchitectureOptions::default())).len(), 33);
        assert_eq!(names(adjustment_spec()).len(), 6);
    }

    #[test]
    fn decomposition_output_shapes_at_patch_size() {
        let net = build(Stage::Decomposition, &ArchitectureOptions::default(), 1).unwrap();
        let (r, l) = decompose(&net, &image(48, 48, 3)).unwrap();
        assert_eq!(r.shape(), (48, 48, 3));
        assert_eq!(l.shape(), (48, 48, 1));
        assert!(net.infer(&[&Tensor::zeros(3, 46, 48)]).is_err());
        // odd sizes are padded and cropped back
        let (r, l) = decompose(&net, &image(13, 10, 4)).unwrap();
        assert_eq!((r.height(), r.width(), l.height(), l.width()), (13, 10, 13, 10));
    }

    #[test]
    fn restoration_preserves_size_for_both_wirings() {
        let dnet = build(Stage::Decomposition, &ArchitectureOptions::default(), 1).unwrap();
        let d = decompose_tensor(&dnet, &Tensor::from_field(&image(32, 16, 5))).unwrap();
        for opts in [
            ArchitectureOptions::default(),
            ArchitectureOptions {
                restoration_input: RestorationInput::DecompositionFeatures,
                restoration_conv9_2_channels: 256,
            },
        ] {
            let rnet = build(Stage::Restoration, &opts, 2).unwrap();
            assert_eq!(rnet.required_multiple(), 16);
            let out = restore_tensor(&rnet, opts.restoration_input, &d).unwrap();
            assert_eq!(out.shape(), (3, 32, 16));
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn adjustment_accepts_any_size() {
        let net = build(Stage::Adjustment, &ArchitectureOptions::default(), 1).unwrap();
        assert_eq!(net.required_multiple(), 1);
        for (h, w) in [(1, 1), (7, 3), (5, 11)] {
            let l = illumination(h, w, |y, x| 0.1 + 0.05 * ((y + x) % 5) as f64);
            let out = adjust(&net, &l, AdjustmentRatio::new(2.0).unwrap()).unwrap();
            assert_eq!(out.shape(), (h, w, 1));
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn ratio_must_be_positive() {
        assert!(AdjustmentRatio::new(0.0).is_err());
        assert!(AdjustmentRatio::new(-1.0).is_err());
        assert!(AdjustmentRatio::new(f64::NAN).is_err());
        assert!(AdjustmentRatio::new(0.5).is_ok());
    }

    #[test]
    fn expand_ratio_is_constant() {
        let m = expand_ratio(2.0, 4, 4);
        assert_eq!(m.shape(), (4, 4, 1));
        assert!(m.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn compute_ratio_examples() {
        let ls = illumination(4, 5, |y, x| 0.1 + 0.02 * (y * 5 + x) as f64);
        let lt = illumination(4, 5, |y, x| 2.0 * (0.1 + 0.02 * (y * 5 + x) as f64));
        assert!((compute_ratio(&ls, &lt).unwrap().get() - 2.0).abs() < 1e-12);
        assert!((compute_ratio(&ls, &ls).unwrap().get() - 1.0).abs() < 1e-12);
        assert!(compute_ratio(&ls, &illumination(4, 4, |_, _| 0.5)).is_err());
    }

    #[test]
    fn compute_ratio_matches_loop_oracle() {
        let ls = illumination(6, 7, |y, x| ((y * 13 + x * 7) % 11) as f64 / 10.0);
        let lt = illumination(6, 7, |y, x| ((y * 3 + x * 5) % 9) as f64 / 8.0);
        let mut sum = 0.0;
        for y in 0..6 {
            for x in 0..7 {
                sum += lt.at(y, x, 0) / ls.at(y, x, 0).max(1e-4);
            }
        }
        assert!((compute_ratio(&ls, &lt).unwrap().get() - sum / 42.0).abs() < 1e-9);
    }

    #[test]
    fn gamma_examples() {
        let ls = illumination(5, 5, |y, x| 0.05 + 0.03 * (y * 5 + x) as f64);
        assert!((gamma_equivalent(&ls, &ls).unwrap() - 1.0).abs() < 1e-12);
        let sq = IlluminationMap::new(ls.map(|v| v * v)).unwrap();
        assert!((gamma_equivalent(&sq, &ls).unwrap() - 2.0).abs() < 1e-12);
        let ones = illumination(5, 5, |_, _| 1.0);
        assert!(gamma_equivalent(&ls, &ones).is_err());
    }

    #[test]
    fn gamma_matches_loop_oracle() {
        let a = illumination(4, 6, |y, x| 0.01 + ((y * 7 + x * 3) % 10) as f64 / 10.5);
        let b = illumination(4, 6, |y, x| 0.02 + ((y * 5 + x * 11) % 9) as f64 / 9.5);
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..4 {
            for x in 0..6 {
                num += a.at(y, x, 0).ln().abs();
                den += b.at(y, x, 0).ln().abs();
            }
        }
        assert!((gamma_equivalent(&a, &b).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn stage_parses_aliases() {
        assert_eq!("decom".parse::<Stage>().unwrap(), Stage::Decomposition);
        assert_eq!("restoration".parse::<Stage>().unwrap(), Stage::Restoration);
        assert_eq!("adjust".parse::<Stage>().unwrap(), Stage::Adjustment);
        assert!("denoise".parse::<Stage>().is_err());
    }

    #[test]
    fn illumination_is_translation_equivariant_in_the_interior() {
        let net = build(Stage::Decomposition, &ArchitectureOptions::default(), 7).unwrap();
        let base = image(40, 40, 11);
        // shift by 4 (a multiple of the pooling stride) so pooling grids align
        let shifted = Image::new(Field::from_fn(40, 40, 3, |y, x, c| base.at((y + 4).min(39), x, c))).unwrap();
        let (_, l0) = decompose(&net, &base).unwrap();
        let (_, l1) = decompose(&net, &shifted).unwrap();
        for y in 12..24 {
            for x in 12..28 {
                assert!((l1.at(y, x, 0) - l0.at(y + 4, x, 0)).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ratio_of_map_with_itself_is_one(values in proptest::collection::vec(0.01f64..1.0, 12)) {
            let l = IlluminationMap::new(Field::from_vec(3, 4, 1, values).unwrap()).unwrap();
            prop_assert!((compute_ratio(&l, &l).unwrap().get() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn adjustment_output_shape_matches(h in 1usize..9, w in 1usize..9, alpha in 0.1f64..5.0) {
            let net = build(Stage::Adjustment, &ArchitectureOptions::default(), 3).unwrap();
            let l = illumination(h, w, |y, x| 0.2 + 0.01 * (y + x) as f64);
            let out = adjust(&net, &l, AdjustmentRatio::new(alpha).unwrap()).unwrap();
            prop_assert_eq!(out.shape(), (h, w, 1));
        }
    }
}
