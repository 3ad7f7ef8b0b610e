//! Model input assembly: text prefix, condition segments, generation orders, and
//! the target-aware positional index of every generation step.
//!
//! Step `i` of a layout feeds the embedding of the previously generated token
//! (a learned start embedding at step 0) plus the positional embedding of
//! `order[i]`, and is trained to predict the token at `order[i]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::tokenizer::{mask_token_ids, EditMask, MaskSelector, TokenGrid};

/// Padding id of the text vocabulary.
pub const PAD: u32 = 0;

/// Default text length.
pub const DEFAULT_TEXT_LEN: usize = 16;

/// Word list of the synthetic instruction/caption grammar. Index = token id.
pub const WORDS: &[&str] = &[
    "<pad>", "a", "the", "and", "on", "make", "add", "remove", "replace", "with", "top", "bottom",
    "left", "right", "square", "circle", "bar", "red", "green", "blue", "yellow", "cyan",
    "magenta", "white", "black", "orange", "purple", "gray", "no", "change", "background", "image",
];

/// Fixed word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<String>,
    size: usize,
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::new(64)
    }
}

impl TextVocab {
    /// The grammar's words, with the table padded to `size` ids.
    pub fn new(size: usize) -> Self {
        assert!(size >= WORDS.len(), "vocabulary smaller than the grammar");
        Self { words: WORDS.iter().map(|s| s.to_string()).collect(), size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).filter(|&i| i != 0).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// Fixed-length text ids, left-padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextTokens {
    pub ids: Vec<u32>,
}

impl TextTokens {
    /// Whitespace-tokenizes `text`. Unknown words and over-long text are input errors.
    pub fn encode(text: &str, vocab: &TextVocab, len: usize) -> Result<Self> {
        let mut words = Vec::new();
        for w in text.split_whitespace() {
            let w = w.to_ascii_lowercase();
            match vocab.id(&w) {
                Some(id) => words.push(id),
                None => return Err(NepError::Input(format!("unknown word {w:?}"))),
            }
        }
        if words.len() > len {
            return Err(NepError::Input(format!("{} words exceed text length {len}", words.len())));
        }
        let mut ids = vec![PAD; len - words.len()];
        ids.extend(words);
        Ok(Self { ids })
    }

    /// All-padding text (the unconditional prompt).
    pub fn empty(len: usize) -> Self {
        Self { ids: vec![PAD; len] }
    }

    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        let first_word = ids.iter().position(|&i| i != PAD).unwrap_or(ids.len());
        if ids[first_word..].contains(&PAD) {
            return Err(NepError::Input("padding must be a contiguous left prefix".into()));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.iter().all(|&i| i == PAD)
    }

    pub fn decode(&self, vocab: &TextVocab) -> String {
        self.ids
            .iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| vocab.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Distinct grid positions in generation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationOrder {
    positions: Vec<usize>,
}

impl GenerationOrder {
    pub fn new(positions: Vec<usize>, grid_len: usize) -> Result<Self> {
        let mut seen = vec![false; grid_len];
        for &p in &positions {
            if p >= grid_len {
                return Err(NepError::Layout(format!("position {p} outside grid of {grid_len}")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(NepError::Layout(format!("position {p} repeated")));
            }
        }
        Ok(Self { positions })
    }

    pub fn identity(len: usize) -> Self {
        Self { positions: (0..len).collect() }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_ascending(&self) -> bool {
        self.positions.windows(2).all(|w| w[0] < w[1])
    }

    pub fn is_permutation_of(&self, len: usize) -> bool {
        self.positions.len() == len
    }
}

/// Identity order with probability `raster_prob`, otherwise a uniform random permutation.
/// No randomness is drawn when `raster_prob >= 1`.
pub fn sample_order<R: Rng + ?Sized>(len: usize, rng: &mut R, raster_prob: f64) -> GenerationOrder {
    let raster = raster_prob >= 1.0 || (raster_prob > 0.0 && rng.gen_bool(raster_prob));
    let mut order = GenerationOrder::identity(len);
    if !raster {
        order.positions.shuffle(rng);
    }
    order
}

/// Ascending positions whose patch-mask bit is set.
pub fn editing_order(mask: &EditMask) -> GenerationOrder {
    GenerationOrder {
        positions: mask.patch.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    Text = 0,
    Source = 1,
    Mask = 2,
}

/// Content of one condition slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrefixToken {
    Text(u32),
    Source(u32),
    /// A source slot whose token is withheld (revision regions under masking).
    Placeholder,
    Mask(MaskSelector),
}

impl PrefixToken {
    pub fn tag(&self) -> SegmentTag {
        match self {
            PrefixToken::Text(_) => SegmentTag::Text,
            PrefixToken::Source(_) | PrefixToken::Placeholder => SegmentTag::Source,
            PrefixToken::Mask(_) => SegmentTag::Mask,
        }
    }
}

/// A condition slot: its token and its position (text index or grid position).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrefixSlot {
    pub token: PrefixToken,
    pub pos: usize,
}

/// Fully assembled model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub prefix: Vec<PrefixSlot>,
    pub gen_order: GenerationOrder,
    /// Ground-truth token for each generation step, in order sequence.
    pub teacher_ids: Option<Vec<u32>>,
    /// Token count of a full image.
    pub grid_len: usize,
}

impl SequenceLayout {
    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    pub fn steps(&self) -> usize {
        self.gen_order.len()
    }

    /// Positional-embedding index of the token each step predicts.
    pub fn pe_index_per_step(&self) -> &[usize] {
        self.gen_order.positions()
    }

    pub fn segment_tags(&self) -> Vec<SegmentTag> {
        self.prefix.iter().map(|s| s.token.tag()).collect()
    }

    /// Condition stream ids: text ids, source ids, mask selectors (0/1).
    /// Placeholders appear as `u32::MAX`.
    pub fn prefix_ids(&self) -> Vec<u32> {
        self.prefix
            .iter()
            .map(|s| match s.token {
                PrefixToken::Text(i) | PrefixToken::Source(i) => i,
                PrefixToken::Placeholder => u32::MAX,
                PrefixToken::Mask(m) => m as u32,
            })
            .collect()
    }

    /// Scatters a per-step token stream back onto a grid (positions not generated stay `None`).
    pub fn scatter(&self, stream: &[u32]) -> Vec<Option<u32>> {
        let mut out = vec![None; self.grid_len];
        for (&pos, &id) in self.gen_order.positions().iter().zip(stream) {
            out[pos] = Some(id);
        }
        out
    }
}

fn text_prefix(text: &TextTokens) -> Vec<PrefixSlot> {
    text.ids
        .iter()
        .enumerate()
        .map(|(i, &id)| PrefixSlot { token: PrefixToken::Text(id), pos: i })
        .collect()
}

/// Text-to-image layout in an arbitrary full order.
pub fn build_pretrain_layout(
    text: &TextTokens,
    grid: &TokenGrid,
    order: &GenerationOrder,
) -> Result<SequenceLayout> {
    if !order.is_permutation_of(grid.len()) {
        return Err(NepError::Layout(format!(
            "order of length {} for a grid of {} tokens",
            order.len(),
            grid.len()
        )));
    }
    let teacher = order.positions().iter().map(|&p| grid.ids[p]).collect();
    Ok(SequenceLayout {
        prefix: text_prefix(text),
        gen_order: order.clone(),
        teacher_ids: Some(teacher),
        grid_len: grid.len(),
    })
}

/// Text-to-image layout for inference (no teacher tokens).
pub fn build_generation_layout(text: &TextTokens, grid_len: usize, order: &GenerationOrder) -> Result<SequenceLayout> {
    if !order.is_permutation_of(grid_len) {
        return Err(NepError::Layout(format!("order of length {} for {grid_len} tokens", order.len())));
    }
    Ok(SequenceLayout {
        prefix: text_prefix(text),
        gen_order: order.clone(),
        teacher_ids: None,
        grid_len,
    })
}

/// Plain raster next-token layout, built directly without an order object.
pub fn build_raster_ntp_layout(text: &TextTokens, grid: &TokenGrid) -> SequenceLayout {
    SequenceLayout {
        prefix: text_prefix(text),
        gen_order: GenerationOrder { positions: (0..grid.len()).collect() },
        teacher_ids: Some(grid.ids.clone()),
        grid_len: grid.len(),
    }
}

/// Options beyond the default editing layout.
#[derive(Debug, Clone, Default)]
pub struct EditLayoutOptions {
    /// Generation order over the mask positions; defaults to ascending.
    pub order: Option<GenerationOrder>,
    /// Withhold source tokens under the mask.
    pub mask_previous: bool,
}

/// Editing layout: text ⧺ source ids ⧺ mask selectors, generating the mask positions in
/// ascending order. Without a mask (or with an empty one) every position is generated in
/// raster order.
pub fn build_edit_layout(
    text: &TextTokens,
    source: &TokenGrid,
    mask: Option<&EditMask>,
    targets: Option<&TokenGrid>,
) -> Result<SequenceLayout> {
    build_edit_layout_with(text, source, mask, targets, &EditLayoutOptions::default())
}

pub fn build_edit_layout_with(
    text: &TextTokens,
    source: &TokenGrid,
    mask: Option<&EditMask>,
    targets: Option<&TokenGrid>,
    opts: &EditLayoutOptions,
) -> Result<SequenceLayout> {
    let l = source.len();
    if let Some(m) = mask {
        if m.patch.len() != l {
            return Err(NepError::Layout(format!("mask of {} patches for {l} source tokens", m.patch.len())));
        }
    }
    if let Some(t) = targets {
        if t.rows != source.rows || t.cols != source.cols {
            return Err(NepError::Layout(format!(
                "target grid {}×{} does not match source {}×{}",
                t.rows, t.cols, source.rows, source.cols
            )));
        }
    }
    let masked = mask.filter(|m| !m.is_empty());
    let selectors = match masked {
        Some(m) => mask_token_ids(m),
        None => vec![MaskSelector::Unedit; l],
    };
    let gen_order = match (&opts.order, masked) {
        (Some(o), Some(m)) => {
            let mut want = editing_order(m).positions;
            let mut got = o.positions.clone();
            got.sort_unstable();
            want.sort_unstable();
            if got != want {
                return Err(NepError::Layout("custom order must cover exactly the mask positions".into()));
            }
            o.clone()
        }
        (None, Some(m)) => editing_order(m),
        (Some(o), None) if o.is_permutation_of(l) => o.clone(),
        (Some(_), None) => return Err(NepError::Layout("order given without a mask must be full".into())),
        (None, None) => GenerationOrder::identity(l),
    };

    let mut prefix = text_prefix(text);
    prefix.reserve(2 * l);
    for (i, &id) in source.ids.iter().enumerate() {
        let hidden = opts.mask_previous && selectors[i] == MaskSelector::Edit;
        let token = if hidden { PrefixToken::Placeholder } else { PrefixToken::Source(id) };
        prefix.push(PrefixSlot { token, pos: i });
    }
    for (i, &s) in selectors.iter().enumerate() {
        prefix.push(PrefixSlot { token: PrefixToken::Mask(s), pos: i });
    }
    let teacher_ids = targets.map(|t| gen_order.positions().iter().map(|&p| t.ids[p]).collect());
    Ok(SequenceLayout { prefix, gen_order, teacher_ids, grid_len: l })
}
