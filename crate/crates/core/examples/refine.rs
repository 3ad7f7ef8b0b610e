//! Critic-guided refinement of a generated image over several rounds.
//!
//! cargo run --release --example refine -- "a green square top right on black"

mod support;

use nep_core::edit::{encode_text, generate};
use nep_core::model::SamplerConfig;
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::{decode_tokens, TokenizerConfig};
use nep_core::tts::{RefineConfig, Refiner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nep_core::Result<()> {
    let prompt = std::env::args().nth(1).unwrap_or_else(|| "a green square top right on black".into());
    let m = support::models()?;
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let text = encode_text(&prompt, &vocab, m.stage2.config().text_len)?;
    let start = generate(&m.stage2, &text, None, &SamplerConfig::default(), &mut rng)?.grid;

    let refiner = Refiner { model: &m.stage2, tok: &tok, vocab: &vocab, critic: &m.critic, sampler: SamplerConfig::default(), parallel: true };
    let traj = refiner.refine_loop(&start, &prompt, &RefineConfig::default(), &mut rng)?;
    for p in &traj {
        println!("round {}: reward {:.4}{}", p.round, p.reward, if p.accepted { " (accepted)" } else { "" });
    }
    decode_tokens(&start, &tok)?.save("refine_start.png")?;
    decode_tokens(&traj.last().expect("non-empty").grid, &tok)?.save("refine_final.png")?;
    Ok(())
}
