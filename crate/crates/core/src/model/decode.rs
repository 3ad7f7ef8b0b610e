//! Token sampling and incremental decoding over a layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::model::transformer::{layout_inputs, InputToken, Transformer};
use crate::nn::{log_prob, softmax_f64, Real};
use crate::sequence::{PrefixSlot, PrefixToken, SequenceLayout, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Keep only the `k` most likely ids; `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub greedy: bool,
    /// Classifier-free guidance scale; `None` disables the unconditional pass.
    pub cfg_scale: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: None, greedy: false, cfg_scale: None }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { greedy: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == Some(0) {
            return Err(NepError::Config("top_k must be at least 1".into()));
        }
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NepError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Draws one id: arg-max (lowest id on ties) when greedy, else from the
/// temperature-scaled softmax restricted to the top-k ids.
pub fn sample_token<T: Real, R: Rng + ?Sized>(logits: &[T], sampler: &SamplerConfig, rng: &mut R) -> Result<u32> {
    sampler.validate()?;
    if logits.is_empty() {
        return Err(NepError::Input("empty logits".into()));
    }
    if sampler.greedy {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    if let Some(k) = sampler.top_k {
        if k < logits.len() {
            // Stable sort keeps lower ids first among equal logits.
            ids.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
            ids.truncate(k);
            ids.sort_unstable();
        }
    }
    let scaled: Vec<f64> = ids.iter().map(|&i| logits[i].f64() / sampler.temperature).collect();
    let probs = softmax_f64(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&id, p) in ids.iter().zip(&probs) {
        acc += p;
        if u < acc {
            return Ok(id as u32);
        }
    }
    // Rounding left the cumulative sum just under one.
    Ok(*ids.iter().zip(&probs).rev().find(|(_, &p)| p > 0.0).map(|(i, _)| i).unwrap_or(&ids[0]) as u32)
}

/// Generated ids in order sequence with per-step log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// One id per generation step (forced steps included).
    pub ids: Vec<u32>,
    /// Log-probability of each sampled id under the (guided) model distribution.
    pub logprobs: Vec<f64>,
    /// Number of model-sampled steps.
    pub steps: usize,
}

impl DecodeOutput {
    pub fn logprob_sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn unconditional(inputs: &[InputToken]) -> Vec<InputToken> {
    inputs
        .iter()
        .map(|t| match *t {
            InputToken::Prefix(PrefixSlot { token: PrefixToken::Text(_), pos }) => {
                InputToken::Prefix(PrefixSlot { token: PrefixToken::Text(PAD), pos })
            }
            other => other,
        })
        .collect()
}

/// Samples every generation step of `layout` with an incremental cache.
pub fn decode<T: Real, R: Rng + ?Sized>(
    model: &Transformer<T>,
    layout: &SequenceLayout,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<DecodeOutput> {
    decode_forced(model, layout, &[], sampler, rng)
}

/// Like [`decode`], but the first `forced.len()` steps take the given ids (teacher forcing)
/// and are prefilled in one chunk before sampling continues.
pub fn decode_forced<T: Real, R: Rng + ?Sized>(
    model: &Transformer<T>,
    layout: &SequenceLayout,
    forced: &[u32],
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<DecodeOutput> {
    sampler.validate()?;
    let order = layout.gen_order.positions();
    let g = order.len();
    if forced.len() > g {
        return Err(NepError::Layout(format!("{} forced ids for {g} steps", forced.len())));
    }
    if layout.grid_len != model.config().grid_len {
        return Err(NepError::Config("layout grid length differs from model".into()));
    }
    let k = forced.len();
    let mut ids = forced.to_vec();
    if k == g {
        return Ok(DecodeOutput { ids, logprobs: Vec::new(), steps: 0 });
    }
    let mut first = layout_inputs(layout, None);
    for i in 1..=k {
        first.push(InputToken::Gen { prev: Some(forced[i - 1]), target_pos: order[i] });
    }
    let guided = sampler.cfg_scale.filter(|s| *s != 0.0);
    let rows = layout.prefix_len() + g;
    let mut caches = model.new_caches(rows);
    let mut ucaches = guided.map(|_| model.new_caches(rows));

    let mut logprobs = Vec::with_capacity(g - k);
    let mut chunk = first;
    for i in k..g {
        let mut logits = model.forward_cached(&chunk, &mut caches, 1)?;
        if let (Some(s), Some(uc)) = (guided, ucaches.as_mut()) {
            let ulogits = model.forward_cached(&unconditional(&chunk), uc, 1)?;
            for (c, u) in logits.iter_mut().zip(&ulogits) {
                *c = T::of(u.f64() + s * (c.f64() - u.f64()));
            }
        }
        let id = sample_token(&logits, sampler, rng)?;
        logprobs.push(log_prob(&logits, id as usize));
        ids.push(id);
        if i + 1 < g {
            chunk = vec![InputToken::Gen { prev: Some(id), target_pos: order[i + 1] }];
        }
    }
    Ok(DecodeOutput { ids, logprobs, steps: g - k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dominant_logit_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = vec![0.0f32; 16];
        logits[11] = 1e6;
        for _ in 0..100 {
            assert_eq!(sample_token(&logits, &SamplerConfig::default(), &mut rng).unwrap(), 11);
        }
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.5f32, 2.0, 1.0, 2.0];
        assert_eq!(sample_token(&logits, &SamplerConfig::greedy(), &mut rng).unwrap(), 1);
    }

    #[test]
    fn top_k_restricts_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = [0.0f32, 3.0, 2.9, 0.1, -1.0];
        let s = SamplerConfig { top_k: Some(2), ..Default::default() };
        for _ in 0..500 {
            let id = sample_token(&logits, &s, &mut rng).unwrap();
            assert!(id == 1 || id == 2);
        }
    }

    #[test]
    fn zero_top_k_is_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SamplerConfig { top_k: Some(0), ..Default::default() };
        assert!(matches!(sample_token(&[0.0f32; 3], &s, &mut rng), Err(NepError::Config(_))));
        let s = SamplerConfig { temperature: 0.0, ..Default::default() };
        assert!(sample_token(&[0.0f32; 3], &s, &mut rng).is_err());
    }
}
