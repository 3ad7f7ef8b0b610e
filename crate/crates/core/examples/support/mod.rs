//! Checkpoint loading shared by the examples.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nep_core::model::{load_checkpoint, save_checkpoint, Transformer};
use nep_core::recipe::{train_desk_critic, train_stage1, train_stage2, DeskRecipe};
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::TokenizerConfig;
use nep_core::tts::Critic;

pub struct Models {
    pub stage1: Transformer<f32>,
    pub stage2: Transformer<f32>,
    pub critic: Critic,
}

/// Directory holding `stage1.nep`, `stage2.nep` and `critic.nepc`; `$NEP_DESK` or `desk_out`.
pub fn desk_dir() -> PathBuf {
    std::env::var_os("NEP_DESK").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("desk_out"))
}

/// Loads the desk checkpoints, or trains a short version of the recipe into the directory.
pub fn models() -> nep_core::Result<Models> {
    let dir = desk_dir();
    let files = ["stage1.nep", "stage2.nep", "critic.nepc"].map(|f| dir.join(f));
    if files.iter().all(|f| f.exists()) {
        return Ok(Models {
            stage1: load_checkpoint(&files[0])?.0,
            stage2: load_checkpoint(&files[1])?.0,
            critic: Critic::load(&files[2])?,
        });
    }
    eprintln!("no checkpoints in {}; training a 10% recipe (run the desk_recipe example for full quality)", dir.display());
    train_short(&dir, &files)
}

fn train_short(dir: &Path, files: &[PathBuf; 3]) -> nep_core::Result<Models> {
    std::fs::create_dir_all(dir)?;
    let recipe = DeskRecipe::default().scaled(0.1);
    let (vocab, tok) = (TextVocab::default(), TokenizerConfig::default());
    let scenes = recipe.scenes();
    let s1 = train_stage1(&recipe, &scenes, &vocab)?;
    let s2 = train_stage2(&recipe, &s1.model, &recipe.triples(), &scenes, &vocab)?;
    let (critic, _) = train_desk_critic(&recipe)?;
    save_checkpoint(&s1.model, &tok, serde_json::to_value(&recipe.pretrain)?, &files[0])?;
    save_checkpoint(&s2.model, &tok, serde_json::to_value(&recipe.finetune)?, &files[1])?;
    critic.save(&files[2])?;
    Ok(Models { stage1: s1.model, stage2: s2.model, critic })
}
