//! Text-to-image generation in raster order and in a random order.
//!
//! cargo run --release --example generate -- "a red circle top left and a blue bar bottom right on green"

mod support;

use nep_core::data::{scene_match, SceneSpec};
use nep_core::edit::{encode_text, generate};
use nep_core::model::SamplerConfig;
use nep_core::sequence::{sample_order, TextVocab};
use nep_core::tokenizer::{decode_tokens, TokenizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nep_core::Result<()> {
    let caption = std::env::args().nth(1).unwrap_or_else(|| "a red circle top left and a blue bar bottom right on green".into());
    let spec = SceneSpec::parse_caption(&caption)?;
    let m = support::models()?;
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let text = encode_text(&caption, &vocab, m.stage1.config().text_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let raster = generate(&m.stage1, &text, None, &SamplerConfig::greedy(), &mut rng)?;
    let order = sample_order(64, &mut rng, 0.0);
    let shuffled = generate(&m.stage1, &text, Some(&order), &SamplerConfig::greedy(), &mut rng)?;
    for (name, g) in [("raster", &raster), ("random_order", &shuffled)] {
        let path = format!("generate_{name}.png");
        decode_tokens(&g.grid, &tok)?.save(&path)?;
        println!("{name}: {} steps, scene match {:.2}, saved {path}", g.steps, scene_match(&g.grid, &spec));
    }
    Ok(())
}
