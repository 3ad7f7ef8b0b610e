//! Runs the bundled desk recipe end to end and benchmarks NEP against full regeneration.
//!
//! cargo run --release --example desk_recipe -- [scale] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use nep_core::data::{edit_triples, run_benchmark, BenchMode};
use nep_core::model::{save_checkpoint, SamplerConfig};
use nep_core::recipe::{train_desk_critic, train_stage1, train_stage2, DeskRecipe};
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::TokenizerConfig;

fn main() -> nep_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let scale: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "desk_out".into()));
    std::fs::create_dir_all(&out)?;
    let recipe = DeskRecipe::default().scaled(scale);
    let vocab = TextVocab::default();
    let tok = TokenizerConfig::default();
    let scenes = recipe.scenes();

    let t = Instant::now();
    let s1 = train_stage1(&recipe, &scenes, &vocab)?;
    let losses = s1.log.losses();
    for (i, chunk) in losses.chunks(100).enumerate() {
        println!("stage1 steps {:>5}: loss {:.4}", i * 100, chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    println!("stage1 took {:.1}s", t.elapsed().as_secs_f64());
    save_checkpoint(&s1.model, &tok, serde_json::to_value(&recipe.pretrain)?, &out.join("stage1.nep"))?;

    let t = Instant::now();
    let s2 = train_stage2(&recipe, &s1.model, &recipe.triples(), &scenes, &vocab)?;
    let losses = s2.log.losses();
    for (i, chunk) in losses.chunks(100).enumerate() {
        println!("stage2 steps {:>5}: loss {:.4}", i * 100, chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    println!("stage2 took {:.1}s", t.elapsed().as_secs_f64());
    save_checkpoint(&s2.model, &tok, serde_json::to_value(&recipe.finetune)?, &out.join("stage2.nep"))?;

    let t = Instant::now();
    let (critic, closs) = train_desk_critic(&recipe)?;
    let tail = &closs[closs.len().saturating_sub(100)..];
    println!("critic final mse {:.4} took {:.1}s", tail.iter().sum::<f64>() / tail.len() as f64, t.elapsed().as_secs_f64());
    critic.save(&out.join("critic.nepc"))?;

    let held = edit_triples(100, recipe.heldout_seed());
    let sampler = SamplerConfig::greedy();
    for mode in [BenchMode::Nep, BenchMode::NtpFull] {
        let t = Instant::now();
        let r = run_benchmark(&s2.model, &tok, &vocab, &held, mode, &sampler, 0)?;
        let a = &r.aggregate;
        println!(
            "{mode:?}: L1 {:.4} L2 {:.4} sim {:.4} steps {:.1} ({:.1}s)",
            a.mean_l1,
            a.mean_l2,
            a.mean_feature_sim,
            a.mean_steps,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
