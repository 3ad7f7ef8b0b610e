use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NepError, Result};
use crate::nn::BlockShape;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub v_img: usize,
    pub v_txt: usize,
    /// Image tokens per grid (`L`).
    pub grid_len: usize,
    /// Text prefix length (`L_T`).
    pub text_len: usize,
    /// Learned order positional table plus start-of-generation embedding.
    /// Without it the model is a raster-only baseline with fixed sinusoidal positions.
    pub order_aware: bool,
    /// The two-entry mask codebook (edit / non-edit embeddings).
    pub edit_extension: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 512,
            v_img: 64,
            v_txt: 64,
            grid_len: 64,
            text_len: 16,
            order_aware: true,
            edit_extension: false,
        }
    }
}

impl ModelConfig {
    /// Narrower four-layer variant used by the bundled training recipes.
    pub fn small() -> Self {
        Self { d_model: 64, ffn_dim: 256, ..Self::default() }
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape { d_model: self.d_model, n_heads: self.n_heads, ffn_dim: self.ffn_dim }
    }

    pub fn with_edit_extension(mut self) -> Self {
        self.edit_extension = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.block_shape().validate()?;
        if self.n_layers == 0 || self.v_img == 0 || self.v_txt == 0 || self.grid_len == 0 || self.text_len == 0 {
            return Err(NepError::Config(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Checks agreement with the tokenizer geometry.
    pub fn check_tokenizer(&self, tok: &TokenizerConfig) -> Result<()> {
        if tok.seq_len() != self.grid_len || tok.vocab() != self.v_img {
            return Err(NepError::Config(format!(
                "tokenizer yields {} tokens over {} ids, model expects {} over {}",
                tok.seq_len(),
                tok.vocab(),
                self.grid_len,
                self.v_img
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical JSON of the model and tokenizer configs.
pub fn config_hash(model: &ModelConfig, tok: &TokenizerConfig) -> String {
    let json = serde_json::to_string(&(model, tok)).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
