use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lowlight::imaging::{decode_image, encode_png, probe_dimensions, Image};
use lowlight::pipeline::{validate_alpha, EnhancerBundle};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceOptions {
    /// Also return the reflectance and adjusted illumination as PNGs.
    pub return_layers: bool,
    /// Report wall-clock enhancement time. Off by default so identical
    /// requests produce identical bodies.
    pub include_timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceRequest {
    /// Base64 PNG or JPEG.
    pub image: String,
    pub alpha: f64,
    #[serde(default)]
    pub options: EnhanceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceResponse {
    /// Base64 PNG, byte-identical to what the CLI writes.
    pub image: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illumination: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
    pub bundle_id: String,
    /// True when a missing stage was replaced by its fallback.
    pub degraded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ready,
    Degraded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: HealthStatus,
    pub bundle_id: Option<String>,
    pub version: String,
}

impl Health {
    pub fn of(bundle: Option<&EnhancerBundle>) -> Self {
        let status = match bundle {
            Some(b) if !b.is_degraded() => HealthStatus::Ready,
            _ => HealthStatus::Degraded,
        };
        Self {
            status,
            bundle_id: bundle.map(EnhancerBundle::id),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }
}

/// Handles one request synchronously. Validation order: alpha, bundle,
/// encoding, size, decode.
pub fn enhance_request(
    bundle: Option<&EnhancerBundle>,
    request: &EnhanceRequest,
    max_pixels: u64,
) -> Result<EnhanceResponse, ApiError> {
    let alpha = validate_alpha(request.alpha).map_err(|e| ApiError::InvalidAlpha(e.to_string()))?;
    let bundle = bundle.ok_or(ApiError::BundleNotLoaded)?;
    let bytes = STANDARD
        .decode(request.image.trim())
        .map_err(|e| ApiError::InvalidImage(format!("base64: {e}")))?;
    let (w, h) = probe_dimensions(&bytes).map_err(|e| ApiError::InvalidImage(e.to_string()))?;
    let pixels = w as u64 * h as u64;
    if pixels > max_pixels {
        return Err(ApiError::ImageTooLarge { pixels, max: max_pixels });
    }
    let image = decode_image(&bytes).map_err(|e| ApiError::InvalidImage(e.to_string()))?;

    let started = Instant::now();
    let out = bundle
        .enhance(&image, alpha.get())
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let elapsed = started.elapsed();

    let (reflectance, illumination) = if request.options.return_layers {
        (
            Some(png(&out.reflectance.to_image())?),
            Some(png(&out.illumination.to_image())?),
        )
    } else {
        (None, None)
    };
    Ok(EnhanceResponse {
        image: png(&out.image)?,
        width: out.image.width(),
        height: out.image.height(),
        reflectance,
        illumination,
        timing_ms: request.options.include_timing.then(|| elapsed.as_secs_f64() * 1e3),
        bundle_id: bundle.id(),
        degraded: out.degraded,
    })
}

fn png(image: &Image) -> Result<String, ApiError> {
    encode_png(image)
        .map(|b| STANDARD.encode(b))
        .map_err(|e| ApiError::Internal(e.to_string()))
}
