//! Loaded weights plus the synchronous work behind each endpoint.

use std::path::Path;

use image::RgbImage;
use nep_core::data::SceneSpec;
use nep_core::edit::{generate, nep_edit, EditRequest};
use nep_core::model::{config_hash, load_checkpoint, ModelConfig, SamplerConfig, Transformer};
use nep_core::sequence::{TextTokens, TextVocab};
use nep_core::tokenizer::{decode_tokens, encode_image, TokenGrid, TokenizerConfig};
use nep_core::tts::{Critic, RefineConfig, Refiner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::api::*;
use crate::error::ServiceError;

/// Upper bound on refinement rounds per request.
pub const MAX_ROUNDS: usize = 32;
/// Upper bound on candidates per round.
pub const MAX_CANDIDATES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Generate,
    Edit,
    Refine,
}

/// A validated request, ready to run on a worker.
#[derive(Debug, Clone)]
pub enum Task {
    Generate { text: TextTokens, seed: u64, sampler: SamplerConfig },
    Edit(EditRequest),
    Refine { start: Option<RgbImage>, prompt: String, cfg: RefineConfig, seed: u64, sampler: SamplerConfig },
}

impl Task {
    pub fn kind(&self) -> JobKind {
        match self {
            Task::Generate { .. } => JobKind::Generate,
            Task::Edit(_) => JobKind::Edit,
            Task::Refine { .. } => JobKind::Refine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub path: Option<String>,
    pub config_hash: String,
    pub stage: u8,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub generator: Option<CheckpointInfo>,
    pub critic: Option<String>,
    pub model: Option<ModelConfig>,
    pub tokenizer: TokenizerConfig,
    pub workers: usize,
}

pub struct Engine {
    model: Option<Transformer<f32>>,
    generator_path: Option<String>,
    critic: Option<Critic>,
    critic_path: Option<String>,
    tok: TokenizerConfig,
    vocab: TextVocab,
}

impl Engine {
    pub fn new(model: Option<Transformer<f32>>, critic: Option<Critic>) -> Self {
        Self { model, generator_path: None, critic, critic_path: None, tok: TokenizerConfig::default(), vocab: TextVocab::default() }
    }

    /// Loads a generator checkpoint and, optionally, a critic.
    pub fn load(ckpt: Option<&Path>, critic: Option<&Path>) -> nep_core::Result<Self> {
        let mut engine = Self::new(None, None);
        if let Some(p) = ckpt {
            let (model, header) = load_checkpoint(p)?;
            engine.model = Some(model);
            engine.tok = header.tokenizer;
            engine.generator_path = Some(p.display().to_string());
        }
        if let Some(p) = critic {
            engine.critic = Some(Critic::load(p)?);
            engine.critic_path = Some(p.display().to_string());
        }
        Ok(engine)
    }

    pub fn model(&self) -> Option<&Transformer<f32>> {
        self.model.as_ref()
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tok
    }

    pub fn health(&self, workers: usize) -> Health {
        let generator = self.model.as_ref().map(|m| CheckpointInfo {
            path: self.generator_path.clone(),
            config_hash: config_hash(m.config(), &self.tok),
            stage: if m.config().edit_extension { 2 } else { 1 },
            param_count: m.count_params().total,
        });
        Health {
            status: "ok".into(),
            generator,
            critic: self.critic.as_ref().map(|_| self.critic_path.clone().unwrap_or_else(|| "in-memory".into())),
            model: self.model.as_ref().map(|m| *m.config()),
            tokenizer: self.tok.clone(),
            workers,
        }
    }

    fn require_model(&self) -> Result<&Transformer<f32>, ServiceError> {
        self.model.as_ref().ok_or_else(|| ServiceError::Unavailable("no generator checkpoint is loaded".into()))
    }

    fn require_stage2(&self) -> Result<&Transformer<f32>, ServiceError> {
        let m = self.require_model()?;
        if !m.config().edit_extension {
            return Err(ServiceError::Conflict("the loaded checkpoint has no mask conditioning (stage 1)".into()));
        }
        Ok(m)
    }

    fn text(&self, text: &str, field: &str) -> Result<TextTokens, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::bad("empty_prompt", format!("{field} is empty")));
        }
        let len = self.model.as_ref().map_or(16, |m| m.config().text_len);
        TextTokens::encode(text, &self.vocab, len).map_err(|e| ServiceError::bad("unknown_word", e.to_string()))
    }

    fn sampler(s: Option<SamplerConfig>) -> Result<SamplerConfig, ServiceError> {
        let s = s.unwrap_or_default();
        s.validate().map_err(|e| ServiceError::bad("bad_sampler", e.to_string()))?;
        Ok(s)
    }

    fn image_size_ok(&self, img: &RgbImage) -> Result<(), ServiceError> {
        if img.width() as usize != self.tok.image_w || img.height() as usize != self.tok.image_h {
            return Err(ServiceError::bad(
                "bad_size",
                format!("image is {}×{}, expected {}×{}", img.width(), img.height(), self.tok.image_w, self.tok.image_h),
            ));
        }
        Ok(())
    }

    pub fn prepare_generate(&self, req: &GenerateRequest) -> Result<Task, ServiceError> {
        self.require_model()?;
        Ok(Task::Generate { text: self.text(&req.prompt, "prompt")?, seed: req.seed.unwrap_or(0), sampler: Self::sampler(req.sampler)? })
    }

    pub fn prepare_edit(&self, req: &EditRequestBody) -> Result<Task, ServiceError> {
        let source = decode_image_b64(&req.image)?;
        self.image_size_ok(&source)?;
        let mask = req.mask.as_deref().map(decode_mask_b64).transpose()?;
        if let Some(m) = &mask {
            if m.width != source.width() as usize || m.height != source.height() as usize {
                return Err(ServiceError::bad("size_mismatch", "mask and image sizes differ"));
            }
        }
        self.require_stage2()?;
        let sampler = Self::sampler(req.sampler)?;
        if !req.instruction.trim().is_empty() {
            self.text(&req.instruction, "instruction")?;
        }
        Ok(Task::Edit(EditRequest { source, mask, instruction: req.instruction.clone(), sampler, seed: req.seed.unwrap_or(0) }))
    }

    pub fn prepare_refine(&self, req: &RefineRequest) -> Result<Task, ServiceError> {
        let start = req.image.as_deref().map(decode_image_b64).transpose()?;
        if let Some(img) = &start {
            self.image_size_ok(img)?;
        }
        self.text(&req.prompt, "prompt")?;
        SceneSpec::parse_caption(&req.prompt).map_err(|e| ServiceError::bad("bad_prompt", e.to_string()))?;
        let l = self.tok.seq_len();
        if req.k > l || req.candidates == 0 || req.candidates > MAX_CANDIDATES || req.rounds > MAX_ROUNDS {
            return Err(ServiceError::bad(
                "bad_params",
                format!("need k ≤ {l}, 1 ≤ candidates ≤ {MAX_CANDIDATES}, rounds ≤ {MAX_ROUNDS}"),
            ));
        }
        if self.critic.is_none() {
            return Err(ServiceError::Unavailable("no critic checkpoint is loaded".into()));
        }
        self.require_stage2()?;
        let cfg = RefineConfig { k: req.k, candidates: req.candidates, rounds: req.rounds, mask_previous: req.mask_previous.unwrap_or(true) };
        Ok(Task::Refine { start, prompt: req.prompt.clone(), cfg, seed: req.seed.unwrap_or(0), sampler: Self::sampler(req.sampler)? })
    }

    /// Runs a prepared task to completion.
    pub fn run(&self, task: &Task) -> Result<Value, ServiceError> {
        let v = match task {
            Task::Generate { text, seed, sampler } => serde_json::to_value(self.run_generate(text, *seed, sampler)?),
            Task::Edit(req) => serde_json::to_value(self.run_edit(req)?),
            Task::Refine { start, prompt, cfg, seed, sampler } => {
                serde_json::to_value(self.run_refine(start.as_ref(), prompt, cfg, *seed, sampler)?)
            }
        };
        v.map_err(|e| ServiceError::Internal(e.to_string()))
    }

    fn generate_grid(&self, text: &TextTokens, seed: u64, sampler: &SamplerConfig) -> Result<(TokenGrid, f64, usize), ServiceError> {
        let model = self.require_model()?;
        let out = generate(model, text, None, sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((out.grid, out.logprobs.iter().sum(), out.steps))
    }

    pub fn run_generate(&self, text: &TextTokens, seed: u64, sampler: &SamplerConfig) -> Result<GenerateResult, ServiceError> {
        let (grid, logprob_sum, steps) = self.generate_grid(text, seed, sampler)?;
        let image = encode_png_b64(&decode_tokens(&grid, &self.tok)?)?;
        Ok(GenerateResult { image, tokens: grid.ids, logprob_sum, steps })
    }

    pub fn run_edit(&self, req: &EditRequest) -> Result<EditResponse, ServiceError> {
        let model = self.require_stage2()?;
        let r = nep_edit(model, &self.tok, &self.vocab, req)?;
        let mut edited = vec![false; self.tok.seq_len()];
        for &p in &r.positions {
            edited[p] = true;
        }
        let checksum_source = outside_checksum(&req.source, &edited, &self.tok);
        let checksum_output = outside_checksum(&r.image, &edited, &self.tok);
        Ok(EditResponse {
            image: encode_png_b64(&r.image)?,
            l_e: r.edit_len(),
            logprob_sum: r.logprob_sum(),
            grid: r.grid,
            generated: r.generated,
            positions: r.positions,
            steps: r.steps,
            logprobs: r.logprobs,
            checksum_source,
            checksum_output,
        })
    }

    pub fn run_refine(
        &self,
        start: Option<&RgbImage>,
        prompt: &str,
        cfg: &RefineConfig,
        seed: u64,
        sampler: &SamplerConfig,
    ) -> Result<RefineResult, ServiceError> {
        let model = self.require_stage2()?;
        let critic = self.critic.as_ref().ok_or_else(|| ServiceError::Unavailable("no critic checkpoint is loaded".into()))?;
        let initial = match start {
            Some(img) => encode_image(img, &self.tok)?,
            None => self.generate_grid(&self.text(prompt, "prompt")?, seed, sampler)?.0,
        };
        let refiner = Refiner { model, tok: &self.tok, vocab: &self.vocab, critic, sampler: *sampler, parallel: false };
        let traj = refiner.refine_loop(&initial, prompt, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let trajectory = traj
            .into_iter()
            .map(|p| {
                Ok(RefineRound {
                    round: p.round,
                    image: encode_png_b64(&decode_tokens(&p.grid, &self.tok)?)?,
                    reward: p.reward,
                    accepted: p.accepted,
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Ok(RefineResult { trajectory })
    }
}

/// SHA-256 (hex) of the RGB bytes of every pixel whose patch is not marked in `edited`, raster order.
pub fn outside_checksum(img: &RgbImage, edited: &[bool], tok: &TokenizerConfig) -> String {
    let mut h = Sha256::new();
    for (x, y, px) in img.enumerate_pixels() {
        let patch = (y as usize / tok.patch) * tok.grid_cols() + x as usize / tok.patch;
        if !edited[patch] {
            h.update(px.0);
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
