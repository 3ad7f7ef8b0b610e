//! Seeded dataset generation, JSON-lines shards, and conversion into training samples.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{random_edit, random_scene, EditOp, EditTriple, SceneSpec, GRID};
use crate::error::{NepError, Result};
use crate::sequence::{TextTokens, TextVocab};
use crate::tokenizer::{mask_from_png, png_bytes_gray, png_bytes_rgb, rgb_from_png, EditMask, PixelMask, TokenizerConfig};
use crate::train::{EditSample, T2ISample, TrainConfig, TrainItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardKind {
    T2i,
    Edit,
}

impl std::str::FromStr for ShardKind {
    type Err = NepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2i" => Ok(ShardKind::T2i),
            "edit" => Ok(ShardKind::Edit),
            other => Err(NepError::Config(format!("unknown dataset kind {other:?} (t2i | edit)"))),
        }
    }
}

/// Sample `i` of a seeded set draws from its own stream, so samples are independent of
/// generation order and of each other.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

pub fn t2i_scenes(count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count).map(|i| random_scene(&mut sample_rng(seed, i))).collect()
}

pub fn edit_triples(count: usize, seed: u64) -> Vec<EditTriple> {
    (0..count).map(|i| random_edit(&mut sample_rng(seed, i))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2IRecord {
    pub caption: String,
    pub image: String,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub instruction: String,
    pub source: String,
    pub target: String,
    pub mask: String,
    pub op: EditOp,
    pub scene: SceneSpec,
    pub target_scene: SceneSpec,
}

fn b64_png_rgb(img: &RgbImage) -> Result<String> {
    Ok(B64.encode(png_bytes_rgb(img)?))
}

pub fn t2i_record(spec: &SceneSpec, tok: &TokenizerConfig) -> Result<T2IRecord> {
    Ok(T2IRecord { caption: spec.caption(), image: b64_png_rgb(&spec.render(tok)?)?, scene: spec.clone() })
}

pub fn edit_record(t: &EditTriple, tok: &TokenizerConfig) -> Result<EditRecord> {
    Ok(EditRecord {
        instruction: t.instruction.clone(),
        source: b64_png_rgb(&t.source.render(tok)?)?,
        target: b64_png_rgb(&t.target.render(tok)?)?,
        mask: B64.encode(png_bytes_gray(&t.mask.to_gray())?),
        op: t.op,
        scene: t.source.clone(),
        target_scene: t.target.clone(),
    })
}

/// Shard text: one JSON record per line, in sample order.
pub fn make_dataset(kind: ShardKind, count: usize, seed: u64) -> Result<String> {
    if count == 0 {
        return Err(NepError::Input("count must be at least 1".into()));
    }
    let tok = TokenizerConfig::default();
    let lines: Vec<Result<String>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let line = match kind {
                ShardKind::T2i => serde_json::to_string(&t2i_record(&random_scene(&mut rng), &tok)?)?,
                ShardKind::Edit => serde_json::to_string(&edit_record(&random_edit(&mut rng), &tok)?)?,
            };
            Ok(line + "\n")
        })
        .collect();
    lines.into_iter().collect()
}

pub fn write_dataset(kind: ShardKind, count: usize, seed: u64, path: &Path) -> Result<()> {
    std::fs::write(path, make_dataset(kind, count, seed)?)?;
    Ok(())
}

fn b64_bytes(s: &str, what: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| NepError::Corruption(format!("{what}: {e}")))
}

/// A decoded text-to-image record.
#[derive(Debug, Clone)]
pub struct T2IExample {
    pub caption: String,
    pub image: RgbImage,
    pub scene: SceneSpec,
}

/// A decoded editing record.
#[derive(Debug, Clone)]
pub struct EditExample {
    pub instruction: String,
    pub source: RgbImage,
    pub target: RgbImage,
    pub mask: PixelMask,
    pub op: EditOp,
    pub scene: SceneSpec,
    pub target_scene: SceneSpec,
}

impl EditExample {
    pub fn triple(&self) -> EditTriple {
        EditTriple {
            source: self.scene.clone(),
            op: self.op,
            target: self.target_scene.clone(),
            mask: self.mask.clone(),
            instruction: self.instruction.clone(),
        }
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_t2i_shard(text: &str) -> Result<Vec<T2IExample>> {
    lines(text)
        .map(|(n, l)| {
            let r: T2IRecord =
                serde_json::from_str(l).map_err(|e| NepError::Corruption(format!("line {}: {e}", n + 1)))?;
            Ok(T2IExample { image: rgb_from_png(&b64_bytes(&r.image, "image")?)?, caption: r.caption, scene: r.scene })
        })
        .collect()
}

pub fn parse_edit_shard(text: &str) -> Result<Vec<EditExample>> {
    lines(text)
        .map(|(n, l)| {
            let r: EditRecord =
                serde_json::from_str(l).map_err(|e| NepError::Corruption(format!("line {}: {e}", n + 1)))?;
            Ok(EditExample {
                source: rgb_from_png(&b64_bytes(&r.source, "source")?)?,
                target: rgb_from_png(&b64_bytes(&r.target, "target")?)?,
                mask: mask_from_png(&b64_bytes(&r.mask, "mask")?)?,
                instruction: r.instruction,
                op: r.op,
                scene: r.scene,
                target_scene: r.target_scene,
            })
        })
        .collect()
}

pub fn t2i_sample(spec: &SceneSpec, vocab: &TextVocab, text_len: usize) -> Result<T2ISample> {
    Ok(T2ISample { text: TextTokens::encode(&spec.caption(), vocab, text_len)?, grid: spec.grid() })
}

/// Editing sample; without `masked` the sample regenerates the whole target.
pub fn edit_sample(t: &EditTriple, vocab: &TextVocab, text_len: usize, masked: bool) -> Result<EditSample> {
    let tok = TokenizerConfig::default();
    Ok(EditSample {
        text: TextTokens::encode(&t.instruction, vocab, text_len)?,
        source: t.source.grid(),
        mask: if masked { Some(t.edit_mask(&tok)?) } else { None },
        target: t.target.grid(),
        mask_previous: false,
    })
}

/// Caption-conditioned inpainting of a random token subset with the source withheld there,
/// as used when revising a finished generation.
pub fn inpaint_sample<R: Rng + ?Sized>(spec: &SceneSpec, vocab: &TextVocab, text_len: usize, rng: &mut R) -> Result<EditSample> {
    let l = GRID * GRID;
    let k = rng.gen_range(l / 16..=l / 2);
    let positions = index::sample(rng, l, k).into_vec();
    let grid = spec.grid();
    Ok(EditSample {
        text: TextTokens::encode(&spec.caption(), vocab, text_len)?,
        source: grid.clone(),
        mask: Some(EditMask::from_positions(&positions, &TokenizerConfig::default())?),
        target: grid,
        mask_previous: true,
    })
}

/// Fine-tune items mixed per the config: inpainting, text-to-image rehearsal, and editing
/// samples (masked with probability `edit_mix_fraction`).
pub fn finetune_pool<R: Rng + ?Sized>(
    triples: &[EditTriple],
    scenes: &[SceneSpec],
    cfg: &TrainConfig,
    vocab: &TextVocab,
    text_len: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TrainItem>> {
    if triples.is_empty() || scenes.is_empty() {
        return Err(NepError::Input("fine-tune pool needs triples and scenes".into()));
    }
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            if u < cfg.inpaint_fraction {
                Ok(TrainItem::Edit(inpaint_sample(scene, vocab, text_len, rng)?))
            } else if u < cfg.inpaint_fraction + cfg.rehearsal_fraction {
                Ok(TrainItem::T2I(t2i_sample(scene, vocab, text_len)?))
            } else {
                let t = &triples[rng.gen_range(0..triples.len())];
                let masked = rng.gen_bool(cfg.edit_mix_fraction);
                Ok(TrainItem::Edit(edit_sample(t, vocab, text_len, masked)?))
            }
        })
        .collect()
}
