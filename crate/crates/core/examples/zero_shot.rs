//! Zero-shot editing with the pretrained model alone: the tokens to keep are fed first,
//! then the remaining positions are sampled under the target caption.

mod support;

use nep_core::data::{edit_triples, scene_match, EditTriple};
use nep_core::edit::{encode_text, zero_shot_edit};
use nep_core::model::SamplerConfig;
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::TokenizerConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nep_core::Result<()> {
    let m = support::models()?;
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let text_len = m.stage1.config().text_len;
    let fits = |t: &&EditTriple| t.target.caption().split_whitespace().count() <= text_len;
    for (i, t) in edit_triples(20, 21).iter().filter(fits).take(5).enumerate() {
        let mask = t.edit_mask(&tok)?;
        let keep: Vec<usize> = (0..64).filter(|&p| !mask.patch[p]).collect();
        let caption = t.target.caption();
        let text = encode_text(&caption, &vocab, text_len)?;
        let out = zero_shot_edit(&m.stage1, &t.source.grid(), &keep, &text, &SamplerConfig::greedy(), &mut ChaCha8Rng::seed_from_u64(i as u64))?;
        println!(
            "{:<55} kept {:>2}, sampled {:>2}, scene match source {:.2} -> output {:.2}",
            caption,
            keep.len(),
            out.positions.len(),
            scene_match(&t.source.grid(), &t.target),
            scene_match(&out.grid, &t.target)
        );
    }
    Ok(())
}
