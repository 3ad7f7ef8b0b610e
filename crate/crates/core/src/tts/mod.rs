//! Test-time refinement: score a finished grid with a critic, pick the least salient tokens,
//! regenerate them under several random orders and keep the best candidate only if it
//! beats the current grid.

pub mod critic;
pub mod gradcam;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use critic::{critic_examples, critic_mse, train_critic, Critic, CriticConfig, CriticExample, CriticTrainConfig};
pub use gradcam::{grad_cam_from_trace, grad_cam_scores, propose_revision, CamTrace, GradCamReport, SaliencyCritic};

use crate::edit::{encode_text, fill_back};
use crate::error::{NepError, Result};
use crate::model::{decode, SamplerConfig, Transformer};
use crate::nn::Real;
use crate::sequence::{build_edit_layout_with, EditLayoutOptions, GenerationOrder, TextVocab};
use crate::tokenizer::{decode_tokens, EditMask, TokenGrid, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Tokens revised per round.
    pub k: usize,
    /// Candidate regenerations per round, each under its own random order.
    pub candidates: usize,
    pub rounds: usize,
    /// Withhold the current tokens at revised positions.
    pub mask_previous: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { k: 16, candidates: 4, rounds: 4, mask_previous: true }
    }
}

impl RefineConfig {
    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.k > grid_len {
            return Err(NepError::Config(format!("k = {} exceeds {grid_len} tokens", self.k)));
        }
        if self.candidates == 0 {
            return Err(NepError::Config("at least one candidate is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub order: Vec<usize>,
    pub seed: u64,
    pub grid: TokenGrid,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub grid: TokenGrid,
    pub accepted: bool,
    /// Reward of the returned grid.
    pub reward: f64,
    pub prev_reward: f64,
    /// Revised positions, ascending.
    pub positions: Vec<usize>,
    pub candidates: Vec<Candidate>,
    /// Decode steps over all candidates.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: usize,
    pub grid: TokenGrid,
    pub reward: f64,
    pub accepted: bool,
}

/// Everything a refinement round needs besides the grid.
pub struct Refiner<'a, T, C> {
    pub model: &'a Transformer<T>,
    pub tok: &'a TokenizerConfig,
    pub vocab: &'a TextVocab,
    pub critic: &'a C,
    pub sampler: SamplerConfig,
    /// Run the candidates on the rayon pool.
    pub parallel: bool,
}

impl<T: Real, C: SaliencyCritic + Sync> Refiner<'_, T, C> {
    pub fn reward(&self, grid: &TokenGrid, prompt: &str) -> Result<f64> {
        Ok(self.critic.trace(&decode_tokens(grid, self.tok)?, prompt)?.score)
    }

    fn candidate(&self, current: &TokenGrid, prompt: &str, mask: &EditMask, order: Vec<usize>, seed: u64, cfg: &RefineConfig) -> Result<(Candidate, usize)> {
        let text = encode_text(prompt, self.vocab, self.model.config().text_len)?;
        let opts = EditLayoutOptions {
            order: Some(GenerationOrder::new(order.clone(), current.len())?),
            mask_previous: cfg.mask_previous,
        };
        let layout = build_edit_layout_with(&text, current, Some(mask), None, &opts)?;
        let out = decode(self.model, &layout, &self.sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let grid = fill_back(current, &order, &out.ids);
        let reward = self.reward(&grid, prompt)?;
        Ok((Candidate { order, seed, grid, reward }, out.steps))
    }

    /// One propose/regenerate/accept round.
    pub fn refine_once(&self, current: &TokenGrid, prompt: &str, cfg: &RefineConfig, rng: &mut ChaCha8Rng) -> Result<RefineStep> {
        cfg.validate(current.len())?;
        let report = grad_cam_scores(self.critic, &decode_tokens(current, self.tok)?, prompt)?;
        let prev_reward = report.score;
        let positions = propose_revision(&report, cfg.k)?;
        let unchanged = |candidates| RefineStep {
            grid: current.clone(),
            accepted: false,
            reward: prev_reward,
            prev_reward,
            positions: positions.clone(),
            candidates,
            steps: 0,
        };
        if positions.is_empty() {
            return Ok(unchanged(Vec::new()));
        }
        if !self.model.config().edit_extension {
            return Err(NepError::Config("refinement needs a model with the edit extension".into()));
        }
        let mask = EditMask::from_positions(&positions, self.tok)?;
        let plans: Vec<(Vec<usize>, u64)> = (0..cfg.candidates)
            .map(|_| {
                let mut order = positions.clone();
                order.shuffle(rng);
                (order, rng.gen())
            })
            .collect();
        let run = |(order, seed): &(Vec<usize>, u64)| self.candidate(current, prompt, &mask, order.clone(), *seed, cfg);
        let results: Vec<Result<(Candidate, usize)>> =
            if self.parallel { plans.par_iter().map(run).collect() } else { plans.iter().map(run).collect() };
        let mut candidates = Vec::with_capacity(results.len());
        let mut steps = 0;
        for r in results {
            let (c, s) = r?;
            steps += s;
            candidates.push(c);
        }
        let best = (0..candidates.len())
            .reduce(|a, b| if candidates[b].reward > candidates[a].reward { b } else { a })
            .expect("at least one candidate");
        if candidates[best].reward > prev_reward {
            Ok(RefineStep {
                grid: candidates[best].grid.clone(),
                accepted: true,
                reward: candidates[best].reward,
                prev_reward,
                positions,
                candidates,
                steps,
            })
        } else {
            Ok(RefineStep { steps, ..unchanged(candidates) })
        }
    }

    /// `rounds` refinement rounds; the trajectory starts with the initial grid.
    pub fn refine_loop(&self, initial: &TokenGrid, prompt: &str, cfg: &RefineConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrajectoryPoint>> {
        cfg.validate(initial.len())?;
        let mut traj = vec![TrajectoryPoint { round: 0, grid: initial.clone(), reward: self.reward(initial, prompt)?, accepted: false }];
        for round in 1..=cfg.rounds {
            let cur = &traj.last().expect("non-empty").grid;
            let step = self.refine_once(cur, prompt, cfg, rng)?;
            traj.push(TrajectoryPoint { round, grid: step.grid, reward: step.reward, accepted: step.accepted });
        }
        Ok(traj)
    }
}
