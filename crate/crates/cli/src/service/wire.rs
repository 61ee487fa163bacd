//! JSON envelopes and the mask wire format: base64-encoded 8-bit grayscale
//! PNG with class ids as pixel values (the sentinel `C` marks "no scribble").

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use intercnn_core::dataio::png_codec::{decode_gray, decode_intensities, encode_gray8};
use intercnn_core::grid::{ImageSlice, Shape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn bad_image(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_image", message)
    }

    pub fn bad_scribbles(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_scribbles", message)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id:?}"))
    }

    pub fn no_model() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", "no checkpoints are loaded")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Serialize, Deserialize)]
struct ErrorDetail {
    code: String,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
            },
        };
        (self.status, axum::Json(body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn encode_mask(shape: Shape, values: &[u8]) -> String {
    let png = encode_gray8(shape.width, shape.height, values).expect("in-memory PNG encoding cannot fail");
    STANDARD.encode(png)
}

fn decode_base64(field: &str, text: &str) -> std::result::Result<Vec<u8>, String> {
    STANDARD
        .decode(text.trim())
        .map_err(|e| format!("{field} is not valid base64: {e}"))
}

/// A class-id mask sent by a client.
pub fn decode_mask(field: &str, text: &str) -> std::result::Result<(Shape, Vec<u8>), String> {
    let bytes = decode_base64(field, text)?;
    let img = decode_gray(&bytes).map_err(|e| format!("{field}: {e}"))?;
    let values = img.to_u8().map_err(|e| format!("{field}: {e}"))?;
    Ok((Shape::new(img.height, img.width), values))
}

pub fn decode_image(text: &str) -> ApiResult<ImageSlice> {
    let bytes = decode_base64("image_png", text).map_err(ApiError::bad_image)?;
    decode_intensities(&bytes).map_err(|e| ApiError::bad_image(format!("image_png: {e}")))
}

pub fn parse_json<'a, T: Deserialize<'a>>(body: &'a [u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub image_png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScribbleRequest {
    pub scribbles_png: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotRequest {
    pub ground_truth_png: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class_id: u8,
    pub pixel_count: usize,
    /// Mean probability of this class over the pixels assigned to it (0 when none are).
    pub mean_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBody {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub interaction_count: usize,
    pub mask_png: String,
    pub confidence: Vec<ClassConfidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub interaction: usize,
    pub scribbles_png: String,
    pub mask_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBody {
    #[serde(flatten)]
    pub prediction: PredictionBody,
    pub base_mask_png: String,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotBody {
    pub scribbles_png: String,
    pub marked_pixels: usize,
}
