//! Bundled desk-scale training recipe: random-order text-to-image pretraining on the
//! shapes world, editing fine-tune with the mask codebook, and critic training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{edit_triples, finetune_pool, t2i_sample, t2i_scenes, EditTriple, SceneSpec};
use crate::error::{NepError, Result};
use crate::model::{ModelConfig, Transformer};
use crate::nn::OptimizerConfig;
use crate::sequence::TextVocab;
use crate::train::{TrainConfig, TrainItem, Trainer};
use crate::tts::{critic_examples, train_critic, Critic, CriticConfig, CriticTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskRecipe {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Text-to-image scenes drawn for pretraining and rehearsal.
    pub t2i_count: usize,
    /// Editing triples drawn for fine-tuning.
    pub edit_count: usize,
    /// Items in the mixed fine-tune pool.
    pub pool_count: usize,
    pub data_seed: u64,
    pub critic: CriticConfig,
    pub critic_train: CriticTrainConfig,
    pub critic_examples: usize,
}

impl Default for DeskRecipe {
    fn default() -> Self {
        let optimizer = OptimizerConfig { lr: 2e-3, ..OptimizerConfig::default() };
        Self {
            model: ModelConfig::small(),
            pretrain: TrainConfig { steps: 1500, batch_size: 16, optimizer, seed: 1, ..TrainConfig::default() },
            finetune: TrainConfig { steps: 1200, batch_size: 8, optimizer, seed: 2, ..TrainConfig::finetune_default() },
            t2i_count: 4000,
            edit_count: 4000,
            pool_count: 8000,
            data_seed: 17,
            critic: CriticConfig::default(),
            critic_train: CriticTrainConfig::default(),
            critic_examples: 4000,
        }
    }
}

impl DeskRecipe {
    /// Same recipe with every step budget multiplied by `f` (at least one step each).
    pub fn scaled(&self, f: f64) -> Self {
        let s = |n: usize| ((n as f64 * f).round() as usize).max(1);
        let mut r = self.clone();
        r.pretrain.steps = s(r.pretrain.steps);
        r.finetune.steps = s(r.finetune.steps);
        r.critic_train.steps = s(r.critic_train.steps);
        r
    }

    pub fn scenes(&self) -> Vec<SceneSpec> {
        t2i_scenes(self.t2i_count, self.data_seed)
    }

    pub fn triples(&self) -> Vec<EditTriple> {
        edit_triples(self.edit_count, self.data_seed.wrapping_add(1))
    }

    /// Seed for held-out benchmark triples, disjoint from the training streams.
    pub fn heldout_seed(&self) -> u64 {
        self.data_seed.wrapping_add(1000)
    }
}

/// Random-order text-to-image pretraining from a fresh initialization.
pub fn train_stage1(recipe: &DeskRecipe, scenes: &[SceneSpec], vocab: &TextVocab) -> Result<Trainer> {
    if recipe.model.edit_extension {
        return Err(NepError::Config("stage 1 starts without the edit extension".into()));
    }
    let model = Transformer::init(recipe.model, &mut ChaCha8Rng::seed_from_u64(recipe.pretrain.seed))?;
    let data = scenes
        .iter()
        .map(|s| Ok(TrainItem::T2I(t2i_sample(s, vocab, recipe.model.text_len)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model, recipe.pretrain.clone())?;
    trainer.fit(&data, recipe.pretrain.steps)?;
    Ok(trainer)
}

/// Editing fine-tune starting from a stage-1 model.
pub fn train_stage2(
    recipe: &DeskRecipe,
    stage1: &Transformer<f32>,
    triples: &[EditTriple],
    scenes: &[SceneSpec],
    vocab: &TextVocab,
) -> Result<Trainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.finetune.seed);
    let model = stage1.with_edit_extension(&mut rng)?;
    let pool = finetune_pool(triples, scenes, &recipe.finetune, vocab, recipe.model.text_len, recipe.pool_count, &mut rng)?;
    let mut trainer = Trainer::new(model, recipe.finetune.clone())?;
    trainer.fit(&pool, recipe.finetune.steps)?;
    Ok(trainer)
}

/// Critic fitted to corrupted-scene quality scores. Returns the per-step losses too.
pub fn train_desk_critic(recipe: &DeskRecipe) -> Result<(Critic, Vec<f64>)> {
    let mut critic = Critic::init(recipe.critic, &mut ChaCha8Rng::seed_from_u64(recipe.critic_train.seed))?;
    let examples = critic_examples(recipe.critic_examples, recipe.data_seed.wrapping_add(2));
    let losses = train_critic(&mut critic, &examples, &recipe.critic_train)?;
    Ok((critic, losses))
}
