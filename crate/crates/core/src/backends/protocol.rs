//! JSON bodies of the stage endpoints and the vector blob encoding.
//!
//! Vectors travel as little-endian `f32` bytes, base64 encoded (standard
//! alphabet, padded). Raster images use the same `image_b64` fields.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::BackendError;

pub const CRITIQUE_PATH: &str = "/v1/critique";
pub const INSTRUCT_PATH: &str = "/v1/instruct";
pub const EDIT_PATH: &str = "/v1/edit";
pub const SCORE_PATH: &str = "/v1/score";
pub const HEALTH_PATH: &str = "/v1/health";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueRequest {
    pub prompt: String,
    pub image_b64: String,
    /// The critic prompt template with the prompt substituted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueResponse {
    pub critique: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructRequest {
    pub prompt: String,
    /// Absent for one-step chains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<String>,
    pub image_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructResponse {
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Generating prompt concatenated with the instruction items.
    pub prompt: String,
    pub instruction: String,
    /// The original image, used as the editor's conditioning input.
    pub condition_image_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub image_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub image_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

pub fn encode_vector(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn decode_vector(bytes: &[u8]) -> Result<Vec<f64>, BackendError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(BackendError::BadRequest(format!(
            "vector blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BackendError::BadRequest("vector blob holds non-finite values".into()));
    }
    Ok(values)
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, BackendError> {
    STANDARD
        .decode(text)
        .map_err(|e| BackendError::BadRequest(format!("invalid base64: {e}")))
}

pub fn vector_to_b64(values: &[f64]) -> String {
    b64_encode(&encode_vector(values))
}

pub fn vector_from_b64(text: &str) -> Result<Vec<f64>, BackendError> {
    decode_vector(&b64_decode(text)?)
}

/// Rounds each value through `f32`, the precision vectors have on the wire.
pub fn quantize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| *v as f32 as f64).collect()
}
