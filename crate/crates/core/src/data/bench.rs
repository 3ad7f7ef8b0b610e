//! Paired editing benchmark: mask-scoped regeneration against full regeneration.

use serde::{Deserialize, Serialize};

use super::metrics::{cosine, grid_features, pixel_metrics};
use super::scene::{check_world, EditOp, EditTriple};
use crate::edit::{nep_edit, EditRequest};
use crate::error::{NepError, Result};
use crate::model::{config_hash, SamplerConfig, Transformer};
use crate::nn::Real;
use crate::sequence::TextVocab;
use crate::tokenizer::{encode_image, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Regenerate only the masked tokens.
    Nep,
    /// Regenerate every token in raster order under the same conditioning.
    NtpFull,
}

impl std::str::FromStr for BenchMode {
    type Err = NepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nep" => Ok(BenchMode::Nep),
            "ntp_full" => Ok(BenchMode::NtpFull),
            other => Err(NepError::Config(format!("unknown benchmark mode {other:?} (nep | ntp_full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub op: EditOp,
    pub l1: f64,
    pub l2: f64,
    pub feature_sim: f64,
    pub l_e: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_feature_sim: f64,
    pub mean_steps: f64,
    pub mean_l_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub seed: u64,
    pub per_sample: Vec<SampleScore>,
    pub aggregate: Aggregate,
    pub config_hash: String,
}

/// Edits every triple (sample `i` seeded with `seed + i`) and scores it against its target.
pub fn run_benchmark<T: Real>(
    model: &Transformer<T>,
    tok: &TokenizerConfig,
    vocab: &TextVocab,
    triples: &[EditTriple],
    mode: BenchMode,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<BenchReport> {
    check_world(tok)?;
    if triples.is_empty() {
        return Err(NepError::Input("empty benchmark set".into()));
    }
    let mut per_sample = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let source = t.source.render(tok)?;
        let target = t.target.render(tok)?;
        let l_e = t.edit_mask(tok)?.edit_count();
        let req = EditRequest {
            source,
            mask: match mode {
                BenchMode::Nep => Some(t.mask.clone()),
                BenchMode::NtpFull => None,
            },
            instruction: t.instruction.clone(),
            sampler: *sampler,
            seed: seed.wrapping_add(i as u64),
        };
        let r = nep_edit(model, tok, vocab, &req)?;
        let px = pixel_metrics(&r.image, &target)?;
        let feature_sim = cosine(&grid_features(&encode_image(&r.image, tok)?).0, &grid_features(&t.target.grid()).0)?;
        per_sample.push(SampleScore { index: i, op: t.op, l1: px.l1, l2: px.l2, feature_sim, l_e, steps: r.steps });
    }
    let n = per_sample.len() as f64;
    let mean = |f: &dyn Fn(&SampleScore) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        count: per_sample.len(),
        mean_l1: mean(&|s| s.l1),
        mean_l2: mean(&|s| s.l2),
        mean_feature_sim: mean(&|s| s.feature_sim),
        mean_steps: mean(&|s| s.steps as f64),
        mean_l_e: mean(&|s| s.l_e as f64),
    };
    Ok(BenchReport { mode, seed, per_sample, aggregate, config_hash: config_hash(model.config(), tok) })
}
