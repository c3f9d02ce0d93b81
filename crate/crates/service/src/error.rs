use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Every failure the API reports, each with a stable machine-readable code.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("{0}")]
    InvalidAlpha(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image has {pixels} pixels, limit is {max}")]
    ImageTooLarge { pixels: u64, max: u64 },
    #[error("request body exceeds the size limit")]
    PayloadTooLarge,
    #[error("no enhancer bundle is loaded")]
    BundleNotLoaded,
    #[error("not found")]
    NotFound,
    #[error("internal error: {0}")]
    Internal(String),
}

/// JSON body of an error response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::MalformedRequest(_) | Self::InvalidAlpha(_) | Self::InvalidImage(_) => StatusCode::BAD_REQUEST,
            Self::ImageTooLarge { .. } | Self::PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            Self::BundleNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            Self::NotFound => StatusCode::NOT_FOUND,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::MalformedRequest(_) => "malformed_request",
            Self::InvalidAlpha(_) => "invalid_alpha",
            Self::InvalidImage(_) => "invalid_image",
            Self::ImageTooLarge { .. } => "image_too_large",
            Self::PayloadTooLarge => "payload_too_large",
            Self::BundleNotLoaded => "bundle_not_loaded",
            Self::NotFound => "not_found",
            Self::Internal(_) => "internal",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail {
                code: self.code().to_owned(),
                message: self.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}
