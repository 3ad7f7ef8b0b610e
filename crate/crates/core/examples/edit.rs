//! Mask-scoped editing of a synthetic scene with the fine-tuned model.
//!
//! cargo run --release --example edit -- [seed]

mod support;

use nep_core::data::{edit_triples, pixel_metrics};
use nep_core::edit::{nep_edit, EditRequest};
use nep_core::model::SamplerConfig;
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::TokenizerConfig;

fn main() -> nep_core::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let m = support::models()?;
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let t = &edit_triples(1, seed)[0];
    let source = t.source.render(&tok)?;
    let target = t.target.render(&tok)?;

    let req = EditRequest { source: source.clone(), mask: Some(t.mask.clone()), instruction: t.instruction.clone(), sampler: SamplerConfig::greedy(), seed };
    let out = nep_edit(&m.stage2, &tok, &vocab, &req)?;
    println!("instruction: {}", t.instruction);
    println!("regenerated {} of 64 tokens in {} steps", out.edit_len(), out.steps);
    println!("L1 to target {:.4}, L1 to source {:.4}", pixel_metrics(&out.image, &target)?.l1, pixel_metrics(&out.image, &source)?.l1);

    source.save("edit_source.png")?;
    out.image.save("edit_output.png")?;
    target.save("edit_target.png")?;
    Ok(())
}
