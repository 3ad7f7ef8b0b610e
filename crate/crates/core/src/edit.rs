//! Inference-time editing: mask-scoped regeneration with the fine-tuned model, zero-shot
//! editing with a pretrained model by scheduling kept tokens first, and multi-turn chains.

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::model::{decode, decode_forced, SamplerConfig, Transformer};
use crate::nn::Real;
use crate::sequence::{build_edit_layout, build_generation_layout, GenerationOrder, TextTokens, TextVocab};
use crate::tokenizer::{encode_image, patchify_mask, EditMask, PixelMask, TokenGrid, TokenizerConfig};

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source: RgbImage,
    pub mask: Option<PixelMask>,
    pub instruction: String,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    #[serde(skip)]
    pub image: RgbImage,
    pub grid: TokenGrid,
    /// Generated ids, one per entry of `positions`.
    pub generated: Vec<u32>,
    /// Positions that were regenerated, in decode order.
    pub positions: Vec<usize>,
    /// Model decode steps actually run.
    pub steps: usize,
    pub logprobs: Vec<f64>,
}

impl EditResult {
    /// Number of regenerated tokens (`L_E`).
    pub fn edit_len(&self) -> usize {
        self.positions.len()
    }

    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Token-level edit result before any pixels are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEdit {
    pub grid: TokenGrid,
    pub generated: Vec<u32>,
    pub positions: Vec<usize>,
    pub steps: usize,
    pub logprobs: Vec<f64>,
}

/// Regenerates the masked tokens of `source` and writes them back into a copy of it.
/// An absent or empty mask regenerates every token in raster order.
pub fn nep_edit_tokens<T: Real>(
    model: &Transformer<T>,
    text: &TextTokens,
    source: &TokenGrid,
    mask: Option<&EditMask>,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenEdit> {
    if !model.config().edit_extension {
        return Err(NepError::Config("editing needs a model with the edit extension".into()));
    }
    let layout = build_edit_layout(text, source, mask, None)?;
    let out = decode(model, &layout, sampler, rng)?;
    let positions = layout.gen_order.positions().to_vec();
    let grid = fill_back(source, &positions, &out.ids);
    Ok(TokenEdit { grid, generated: out.ids, positions, steps: out.steps, logprobs: out.logprobs })
}

/// Copy of `source` with `ids` written at `positions`.
pub fn fill_back(source: &TokenGrid, positions: &[usize], ids: &[u32]) -> TokenGrid {
    let mut grid = source.clone();
    for (&p, &id) in positions.iter().zip(ids) {
        grid.ids[p] = id;
    }
    grid
}

/// Source pixels everywhere except the regenerated patches, which are painted from `grid`.
pub fn paint_patches(source: &RgbImage, grid: &TokenGrid, positions: &[usize], tok: &TokenizerConfig) -> RgbImage {
    let mut img = source.clone();
    let p = tok.patch;
    for &pos in positions {
        let (r, c) = (pos / grid.cols, pos % grid.cols);
        let color = Rgb(tok.palette[grid.ids[pos] as usize]);
        for y in r * p..(r + 1) * p {
            for x in c * p..(c + 1) * p {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    img
}

/// Encodes the instruction, treating an empty string as an all-padding prefix.
pub fn encode_text(text: &str, vocab: &TextVocab, len: usize) -> Result<TextTokens> {
    if text.trim().is_empty() {
        Ok(TextTokens::empty(len))
    } else {
        TextTokens::encode(text, vocab, len)
    }
}

/// Pixel-level editing: unmasked patches of the output are the source's own pixels.
pub fn nep_edit<T: Real>(
    model: &Transformer<T>,
    tok: &TokenizerConfig,
    vocab: &TextVocab,
    req: &EditRequest,
) -> Result<EditResult> {
    let source = encode_image(&req.source, tok)?;
    let mask = req.mask.as_ref().map(|m| patchify_mask(m, tok)).transpose()?;
    let text = encode_text(&req.instruction, vocab, model.config().text_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let e = nep_edit_tokens(model, &text, &source, mask.as_ref(), &req.sampler, &mut rng)?;
    let image = paint_patches(&req.source, &e.grid, &e.positions, tok);
    Ok(EditResult { image, grid: e.grid, generated: e.generated, positions: e.positions, steps: e.steps, logprobs: e.logprobs })
}

/// Zero-shot editing with a pretrained model: kept positions are teacher-forced first
/// (ascending), then the remaining positions are sampled (ascending).
pub fn zero_shot_edit<T: Real>(
    model: &Transformer<T>,
    source: &TokenGrid,
    keep_positions: &[usize],
    text: &TextTokens,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenEdit> {
    let l = source.len();
    let mut keep = vec![false; l];
    for &p in keep_positions {
        if p >= l {
            return Err(NepError::Input(format!("keep position {p} outside {l} tokens")));
        }
        keep[p] = true;
    }
    let kept: Vec<usize> = (0..l).filter(|&p| keep[p]).collect();
    let edited: Vec<usize> = (0..l).filter(|&p| !keep[p]).collect();
    let order = GenerationOrder::new([kept.clone(), edited.clone()].concat(), l)?;
    let layout = build_generation_layout(text, l, &order)?;
    let forced: Vec<u32> = kept.iter().map(|&p| source.ids[p]).collect();
    let out = decode_forced(model, &layout, &forced, sampler, rng)?;
    let generated = out.ids[kept.len()..].to_vec();
    let grid = fill_back(source, &edited, &generated);
    Ok(TokenEdit { grid, generated, positions: edited, steps: out.steps, logprobs: out.logprobs })
}

/// One turn of a multi-turn session.
#[derive(Debug, Clone)]
pub struct EditTurn {
    pub mask: Option<PixelMask>,
    pub instruction: String,
}

/// Applies the turns in sequence; each output image is the next turn's source.
/// Turn `t` samples with seed `seed + t`.
pub fn multi_turn_edit<T: Real>(
    model: &Transformer<T>,
    tok: &TokenizerConfig,
    vocab: &TextVocab,
    source: &RgbImage,
    turns: &[EditTurn],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<EditResult>> {
    if turns.is_empty() {
        return Err(NepError::Input("at least one turn is required".into()));
    }
    let mut current = source.clone();
    let mut out = Vec::with_capacity(turns.len());
    for (t, turn) in turns.iter().enumerate() {
        let req = EditRequest {
            source: current,
            mask: turn.mask.clone(),
            instruction: turn.instruction.clone(),
            sampler: *sampler,
            seed: seed.wrapping_add(t as u64),
        };
        let r = nep_edit(model, tok, vocab, &req)?;
        current = r.image.clone();
        out.push(r);
    }
    Ok(out)
}

/// Text-to-image sampling of a full grid (raster order unless `order` is given).
pub fn generate<T: Real>(
    model: &Transformer<T>,
    text: &TextTokens,
    order: Option<&GenerationOrder>,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TokenEdit> {
    let l = model.config().grid_len;
    let order = order.cloned().unwrap_or_else(|| GenerationOrder::identity(l));
    let layout = build_generation_layout(text, l, &order)?;
    let out = decode(model, &layout, sampler, rng)?;
    let side = (l as f64).sqrt() as usize;
    if side * side != l {
        return Err(NepError::Config(format!("grid length {l} is not square")));
    }
    let blank = TokenGrid::filled(0, side, side);
    let positions = order.positions().to_vec();
    let grid = fill_back(&blank, &positions, &out.ids);
    Ok(TokenEdit { grid, generated: out.ids, positions, steps: out.steps, logprobs: out.logprobs })
}
