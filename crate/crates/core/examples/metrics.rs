//! Pixel, feature, directional and Fréchet metrics on synthetic data; no model needed.

use nep_core::data::*;
use nep_core::tokenizer::TokenizerConfig;

fn main() -> nep_core::Result<()> {
    let tok = TokenizerConfig::default();
    for t in edit_triples(4, 0) {
        let (src, tgt) = (t.source.render(&tok)?, t.target.render(&tok)?);
        let px = pixel_metrics(&src, &tgt)?;
        let d = directional_metrics(&t.source.grid(), &t.target.grid(), &t.source.caption(), &t.target.caption())?;
        println!(
            "{:<40} L1 {:.4} L2 {:.4} feature sim {:.3} dir sim {:?} out sim {:.3}",
            t.instruction,
            px.l1,
            px.l2,
            feature_similarity(&src, &tgt, &tok)?,
            d.dir_sim,
            d.out_sim
        );
    }

    let feats = |seed| -> Vec<Vec<f64>> { t2i_scenes(300, seed).iter().map(|s| grid_features(&s.grid()).0).collect() };
    let sources: Vec<Vec<f64>> = edit_triples(300, 5).iter().map(|t| grid_features(&t.source.grid()).0).collect();
    println!("Fréchet proxy, two scene draws:        {:.4}", frechet_distance(&feats(1), &feats(2))?);
    println!("Fréchet proxy, scenes vs edit sources: {:.4}", frechet_distance(&feats(1), &sources)?);
    Ok(())
}
