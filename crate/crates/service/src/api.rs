//! Wire types. Images travel as base64-encoded PNG.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use nep_core::model::SamplerConfig;
use nep_core::tokenizer::{mask_from_png, png_bytes_rgb, rgb_from_png, PixelMask, TokenGrid};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequestBody {
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub instruction: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    /// Starting image; generated from the prompt when absent.
    #[serde(default)]
    pub image: Option<String>,
    pub prompt: String,
    pub rounds: usize,
    pub k: usize,
    pub candidates: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mask_previous: Option<bool>,
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub image: String,
    pub tokens: Vec<u32>,
    pub logprob_sum: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub image: String,
    pub grid: TokenGrid,
    pub generated: Vec<u32>,
    pub positions: Vec<usize>,
    pub steps: usize,
    pub logprobs: Vec<f64>,
    pub logprob_sum: f64,
    pub l_e: usize,
    /// SHA-256 of the source pixels outside the regenerated patches.
    pub checksum_source: String,
    /// The same digest over the output image.
    pub checksum_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRound {
    pub round: usize,
    pub image: String,
    pub reward: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub trajectory: Vec<RefineRound>,
}

pub fn encode_png_b64(img: &RgbImage) -> Result<String, ServiceError> {
    Ok(B64.encode(png_bytes_rgb(img)?))
}

pub fn decode_image_b64(s: &str) -> Result<RgbImage, ServiceError> {
    let bytes = B64.decode(s.trim()).map_err(|e| ServiceError::bad("bad_image", format!("image is not base64: {e}")))?;
    rgb_from_png(&bytes).map_err(|e| ServiceError::bad("bad_image", format!("image is not a PNG: {e}")))
}

pub fn decode_mask_b64(s: &str) -> Result<PixelMask, ServiceError> {
    let bytes = B64.decode(s.trim()).map_err(|e| ServiceError::bad("bad_mask", format!("mask is not base64: {e}")))?;
    mask_from_png(&bytes).map_err(|e| ServiceError::bad("bad_mask", format!("mask is not a PNG: {e}")))
}
