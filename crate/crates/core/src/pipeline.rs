//! End-to-end enhancement: decompose, restore the reflectance, adjust the
//! illumination to a requested ratio, recompose.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::imaging::{recompose, Field, IlluminationMap, Image, ReflectanceMap};
use crate::networks::{self, decompose_tensor, restore_tensor, AdjustmentRatio, ArchitectureOptions, Stage};
use crate::nn::Tensor;

/// Largest accepted ratio.
pub const MAX_ALPHA: f64 = 10.0;
/// Spatial multiple every input is padded to.
pub const PAD_MULTIPLE: usize = 16;

/// Checks `0 < alpha <= MAX_ALPHA`.
pub fn validate_alpha(alpha: f64) -> Result<AdjustmentRatio> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha <= MAX_ALPHA) {
        return Err(Error::OutOfRange(format!("alpha must lie in (0, {MAX_ALPHA}], got {alpha}")));
    }
    AdjustmentRatio::new(alpha)
}

/// The three trained stages. Restoration and adjustment may be absent, in
/// which case enhancement falls back and reports itself as degraded.
#[derive(Clone, Debug)]
pub struct EnhancerBundle {
    decomposition: Checkpoint,
    restoration: Option<Checkpoint>,
    adjustment: Option<Checkpoint>,
}

/// Output of [`EnhancerBundle::enhance`] with the intermediate layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub image: Image,
    pub reflectance: ReflectanceMap,
    pub illumination: IlluminationMap,
    /// Set when a missing stage was replaced by its fallback.
    pub degraded: bool,
}

impl EnhancerBundle {
    pub fn new(
        decomposition: Checkpoint,
        restoration: Option<Checkpoint>,
        adjustment: Option<Checkpoint>,
    ) -> Result<Self> {
        let tagged = |c: &Checkpoint, stage: Stage| {
            if c.stage == stage {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!("expected a {stage} checkpoint, found {}", c.stage)))
            }
        };
        tagged(&decomposition, Stage::Decomposition)?;
        if let Some(r) = &restoration {
            tagged(r, Stage::Restoration)?;
        }
        if let Some(a) = &adjustment {
            tagged(a, Stage::Adjustment)?;
        }
        Ok(Self {
            decomposition,
            restoration,
            adjustment,
        })
    }

    /// Reads `dir/{decomposition,restoration,adjustment}`; only the first is
    /// required.
    pub fn load(dir: &Path) -> Result<Self> {
        let stage_dir = |s: Stage| dir.join(s.as_str());
        let optional = |s: Stage| -> Result<Option<Checkpoint>> {
            let d = stage_dir(s);
            if checkpoint::exists(&d) {
                Checkpoint::load_stage(&d, s).map(Some)
            } else {
                Ok(None)
            }
        };
        let decomposition = Checkpoint::load_stage(&stage_dir(Stage::Decomposition), Stage::Decomposition)?;
        Self::new(decomposition, optional(Stage::Restoration)?, optional(Stage::Adjustment)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.decomposition.save(&dir.join(Stage::Decomposition.as_str()))?;
        if let Some(r) = &self.restoration {
            r.save(&dir.join(Stage::Restoration.as_str()))?;
        }
        if let Some(a) = &self.adjustment {
            a.save(&dir.join(Stage::Adjustment.as_str()))?;
        }
        Ok(())
    }

    /// Freshly initialized networks; useful as a deterministic fixture.
    pub fn initialized(architecture: ArchitectureOptions, seed: u64) -> Result<Self> {
        Self::new(
            Checkpoint::initialize(Stage::Decomposition, architecture, seed)?,
            Some(Checkpoint::initialize(Stage::Restoration, architecture, seed.wrapping_add(1))?),
            Some(Checkpoint::initialize(Stage::Adjustment, architecture, seed.wrapping_add(2))?),
        )
    }

    pub fn is_degraded(&self) -> bool {
        self.restoration.is_none() || self.adjustment.is_none()
    }

    pub fn decomposition(&self) -> &Checkpoint {
        &self.decomposition
    }

    pub fn restoration(&self) -> Option<&Checkpoint> {
        self.restoration.as_ref()
    }

    pub fn adjustment(&self) -> Option<&Checkpoint> {
        self.adjustment.as_ref()
    }

    /// Short hex digest of every loaded weight.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for c in [Some(&self.decomposition), self.restoration.as_ref(), self.adjustment.as_ref()]
            .into_iter()
            .flatten()
        {
            h.update(c.stage.as_str().as_bytes());
            h.update(c.network.fingerprint().as_bytes());
        }
        hex::encode(h.finalize())[..16].to_owned()
    }

    /// Reflectance and illumination of `image`, same size as the input.
    pub fn decompose(&self, image: &Image) -> Result<(ReflectanceMap, IlluminationMap)> {
        let (h, w) = (image.height(), image.width());
        let d = self.decompose_padded(image)?;
        Ok((
            ReflectanceMap::from_field_clamped(d.reflectance.to_field().crop(h, w))?,
            IlluminationMap::from_field_clamped(d.illumination.to_field().crop(h, w))?,
        ))
    }

    fn decompose_padded(&self, image: &Image) -> Result<networks::Decomposed> {
        let padded = Tensor::from_field(&image.reflect_pad_multiple(PAD_MULTIPLE));
        decompose_tensor(&self.decomposition.network, &padded)
    }

    /// Runs all stages; output size equals input size.
    pub fn enhance(&self, image: &Image, alpha: f64) -> Result<Enhanced> {
        let alpha = validate_alpha(alpha)?;
        let (h, w) = (image.height(), image.width());
        let d = self.decompose_padded(image)?;

        let reflectance = match &self.restoration {
            Some(r) => restore_tensor(&r.network, r.architecture.restoration_input, &d)?,
            None => d.reflectance.clone(),
        };
        let reflectance = ReflectanceMap::from_field_clamped(reflectance.to_field().crop(h, w))?;
        let source = IlluminationMap::from_field_clamped(d.illumination.to_field().crop(h, w))?;
        let illumination = match &self.adjustment {
            Some(a) => networks::adjust(&a.network, &source, alpha)?,
            None => IlluminationMap::from_field_clamped(source.map(|v| v * alpha.get()))?,
        };
        let image = recompose(&reflectance, &illumination)?;
        Ok(Enhanced {
            image,
            reflectance,
            illumination,
            degraded: self.is_degraded(),
        })
    }
}

/// Per-pixel `I^(1/γ)`: `γ > 1` brightens, 0 and 1 are fixed points.
pub fn gamma_baseline(image: &Image, gamma: f64) -> Result<Image> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::OutOfRange(format!("gamma must be > 0, got {gamma}")));
    }
    Image::new(image.map(|v| v.powf(1.0 / gamma)).clamp01())
}

/// Mean absolute difference, `‖a − b‖₁ / n`.
pub fn mean_abs_error(a: &Field, b: &Field) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}
