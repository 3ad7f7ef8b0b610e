//! Two-stage training: random-order text-to-image pretraining, then editing fine-tune
//! with the mask codebook. Every step is seed-deterministic; the optional parallel
//! per-sample map reduces gradients in sample order, so it matches the serial path bit-for-bit.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NepError, Result};
use crate::model::{ParamCounts, Transformer};
use crate::nn::{adamw_step_ranges, AdamState, OptimizerConfig};
use crate::sequence::{
    build_edit_layout_with, build_pretrain_layout, sample_order, EditLayoutOptions, SequenceLayout, TextTokens,
};
use crate::tokenizer::{EditMask, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Probability that a pretraining sample uses raster order.
    pub raster_prob: f64,
    /// Share of editing samples that carry their mask (the rest regenerate the full target).
    pub edit_mix_fraction: f64,
    /// Share of fine-tune samples that are caption-conditioned inpainting with withheld sources.
    pub inpaint_fraction: f64,
    /// Share of fine-tune samples that rehearse random-order text-to-image generation.
    pub rehearsal_fraction: f64,
    /// Probability of replacing the text with padding (enables guidance at inference).
    pub text_dropout: f64,
    /// Fine-tune only the mask codebook.
    pub freeze_trunk: bool,
    pub eval_every: usize,
    /// Map samples of a batch across the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            raster_prob: 0.1,
            edit_mix_fraction: 0.5,
            inpaint_fraction: 0.25,
            rehearsal_fraction: 0.1,
            text_dropout: 0.0,
            freeze_trunk: false,
            eval_every: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        Self { steps: 2000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.raster_prob)
            || !frac(self.edit_mix_fraction)
            || !frac(self.inpaint_fraction)
            || !frac(self.rehearsal_fraction)
            || !frac(self.text_dropout)
            || self.inpaint_fraction + self.rehearsal_fraction > 1.0
        {
            return Err(NepError::Config(format!("fractions out of range in {self:?}")));
        }
        if self.batch_size == 0 {
            return Err(NepError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct T2ISample {
    pub text: TextTokens,
    pub grid: TokenGrid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSample {
    pub text: TextTokens,
    pub source: TokenGrid,
    pub mask: Option<EditMask>,
    pub target: TokenGrid,
    /// Withhold source tokens under the mask.
    pub mask_previous: bool,
}

impl EditSample {
    pub fn layout(&self) -> Result<SequenceLayout> {
        if let Some(m) = &self.mask {
            if m.patch.len() != self.source.len() {
                return Err(NepError::Input(format!(
                    "mask of {} patches for {} source tokens",
                    m.patch.len(),
                    self.source.len()
                )));
            }
        }
        let opts = EditLayoutOptions { order: None, mask_previous: self.mask_previous };
        build_edit_layout_with(&self.text, &self.source, self.mask.as_ref(), Some(&self.target), &opts)
    }
}

/// One training example of either stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainItem {
    T2I(T2ISample),
    Edit(EditSample),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub param_counts: Option<ParamCounts>,
    pub config_hash: String,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per step: `{step, loss, lr, elapsed_ms}`.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Owns the model and optimizer state for one training run.
pub struct Trainer {
    pub model: Transformer<f32>,
    pub cfg: TrainConfig,
    opt: AdamState,
    t: u64,
    rng: ChaCha8Rng,
    started: Instant,
    pub log: RunLog,
}

impl Trainer {
    pub fn new(model: Transformer<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.num_params();
        let log = RunLog { records: Vec::new(), param_counts: Some(model.count_params()), config_hash: cfg.hash() };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            opt: AdamState::new(n),
            t: 0,
            started: Instant::now(),
            log,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn maybe_drop_text(&mut self, text: &TextTokens) -> TextTokens {
        if self.cfg.text_dropout > 0.0 && self.rng.gen_bool(self.cfg.text_dropout) {
            TextTokens::empty(text.len())
        } else {
            text.clone()
        }
    }

    /// Layout for one item, drawing a fresh order for text-to-image samples.
    pub fn layout_for(&mut self, item: &TrainItem) -> Result<SequenceLayout> {
        match item {
            TrainItem::T2I(s) => {
                let order = sample_order(s.grid.len(), &mut self.rng, self.cfg.raster_prob);
                let text = self.maybe_drop_text(&s.text);
                build_pretrain_layout(&text, &s.grid, &order)
            }
            TrainItem::Edit(s) => {
                if !self.model.config().edit_extension {
                    return Err(NepError::Config("editing samples need the edit extension".into()));
                }
                let text = self.maybe_drop_text(&s.text);
                EditSample { text, ..s.clone() }.layout()
            }
        }
    }

    /// Random-order text-to-image step.
    pub fn pretrain_step(&mut self, batch: &[T2ISample]) -> Result<f64> {
        let items: Vec<TrainItem> = batch.iter().cloned().map(TrainItem::T2I).collect();
        self.train_step(&items)
    }

    /// Editing step; masked samples train only their mask positions.
    pub fn finetune_edit_step(&mut self, batch: &[EditSample]) -> Result<f64> {
        if !self.model.config().edit_extension {
            return Err(NepError::Config("fine-tuning needs the edit extension".into()));
        }
        let items: Vec<TrainItem> = batch.iter().cloned().map(TrainItem::Edit).collect();
        self.train_step(&items)
    }

    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<f64> {
        if batch.is_empty() {
            return Err(NepError::Input("empty batch".into()));
        }
        let layouts = batch.iter().map(|it| self.layout_for(it)).collect::<Result<Vec<_>>>()?;
        self.step_layouts(&layouts)
    }

    /// Token-level mean loss over the batch, one AdamW update.
    pub fn step_layouts(&mut self, layouts: &[SequenceLayout]) -> Result<f64> {
        let total: usize = layouts.iter().map(|l| l.steps()).sum();
        if total == 0 {
            return Err(NepError::Input("batch has no generation steps".into()));
        }
        let scale = 1.0 / total as f64;
        let model = &self.model;
        let run = |l: &SequenceLayout| -> Result<(f64, Vec<f32>)> {
            let (fwd, g) = model.loss_and_grad(l, scale)?;
            Ok((fwd.nll.iter().sum(), g))
        };
        let per_sample: Vec<Result<(f64, Vec<f32>)>> = if self.cfg.parallel {
            layouts.par_iter().map(run).collect()
        } else {
            layouts.iter().map(run).collect()
        };
        let mut grads = vec![0.0f32; model.num_params()];
        let mut nll = 0.0;
        for r in per_sample {
            let (s, g) = r?;
            nll += s;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        let loss = nll / total as f64;
        self.t += 1;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(NepError::NonFiniteLoss {
                step: self.t as usize,
                detail: format!("loss {loss} over {} samples / {total} tokens", layouts.len()),
            });
        }
        let ranges = if self.cfg.freeze_trunk {
            self.model.edit_extension_ranges()
        } else {
            vec![0..self.model.num_params()]
        };
        adamw_step_ranges(self.model.store_mut().data_mut(), &grads, &mut self.opt, &self.cfg.optimizer, self.t, &ranges);
        self.log.records.push(LogRecord {
            step: self.t as usize,
            loss,
            lr: self.cfg.optimizer.lr,
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        });
        Ok(loss)
    }

    /// Runs `steps` steps, each over a batch drawn epoch-wise (shuffle, then consume) from `data`.
    pub fn fit(&mut self, data: &[TrainItem], steps: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(NepError::Input("empty training set".into()));
        }
        let mut order: Vec<usize> = Vec::new();
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut self.rng);
                    order.reverse();
                }
                batch.push(data[order.pop().expect("refilled")].clone());
            }
            last = self.train_step(&batch)?;
        }
        Ok(last)
    }
}

/// Token-level mean loss of `model` over fixed layouts (no update).
pub fn mean_loss(model: &Transformer<f32>, layouts: &[SequenceLayout]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for l in layouts {
        let f = model.forward_train(l)?;
        nll += f.nll.iter().sum::<f64>();
        count += f.nll.len();
    }
    if count == 0 {
        return Err(NepError::Input("no generation steps to evaluate".into()));
    }
    Ok(nll / count as f64)
}
