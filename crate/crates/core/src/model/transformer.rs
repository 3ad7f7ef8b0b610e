//! Decoder-only transformer over condition slots and generation steps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NepError, Result};
use crate::model::ModelConfig;
use crate::nn::{
    block_backward, block_forward, cross_entropy, gemm, rms_norm_backward, rms_norm_forward,
    BlockGrads, BlockRecord, BlockWeights, LayerCache, ParamStore, Real, Tensor,
};
use crate::sequence::{PrefixSlot, PrefixToken, SegmentTag, SequenceLayout};
use crate::tokenizer::MaskSelector;

/// One input row of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputToken {
    Prefix(PrefixSlot),
    /// Generation step: embedding of the previous token (start embedding when `None`)
    /// plus the positional embedding of the position being predicted.
    Gen { prev: Option<u32>, target_pos: usize },
}

/// Input rows of a layout; generation rows are teacher-forced when `teacher` is given,
/// otherwise only the first generation row is emitted.
pub fn layout_inputs(layout: &SequenceLayout, teacher: Option<&[u32]>) -> Vec<InputToken> {
    let mut out: Vec<InputToken> = layout.prefix.iter().map(|&s| InputToken::Prefix(s)).collect();
    let order = layout.gen_order.positions();
    match teacher {
        Some(ids) => {
            for (i, &pos) in order.iter().enumerate() {
                let prev = if i == 0 { None } else { Some(ids[i - 1]) };
                out.push(InputToken::Gen { prev, target_pos: pos });
            }
        }
        None => {
            if let Some(&pos) = order.first() {
                out.push(InputToken::Gen { prev: None, target_pos: pos });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Index {
    text_emb: usize,
    text_pos: usize,
    img_emb: usize,
    order_pe: Option<usize>,
    sog: Option<usize>,
    segment: usize,
    mask_emb: Option<usize>,
    blocks: Vec<usize>,
    block_len: usize,
    final_norm: usize,
    head: usize,
}

/// Model weights plus the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    idx: Index,
}

/// Teacher-forced forward result.
#[derive(Debug, Clone)]
pub struct TrainForward<T> {
    /// `[steps × V_img]`.
    pub logits: Tensor<T>,
    /// Mean negative log-likelihood over generation steps.
    pub loss: f64,
    /// Per-step negative log-likelihood.
    pub nll: Vec<f64>,
}

struct Trace<T> {
    inputs: Vec<InputToken>,
    records: Vec<BlockRecord<T>>,
    final_in: Vec<T>,
    final_rstd: Vec<T>,
    final_out: Vec<T>,
    prefix_len: usize,
}

impl<T: Real> Transformer<T> {
    /// Tensor names and shapes in storage order.
    pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model;
        let mut specs = vec![
            ("text_emb".to_string(), vec![cfg.v_txt, d]),
            ("text_pos".to_string(), vec![cfg.text_len, d]),
            ("img_emb".to_string(), vec![cfg.v_img, d]),
        ];
        if cfg.order_aware {
            specs.push(("order_pe".into(), vec![cfg.grid_len, d]));
            specs.push(("sog".into(), vec![d]));
        }
        specs.push(("segment".into(), vec![3, d]));
        if cfg.edit_extension {
            specs.push(("mask_emb".into(), vec![2, d]));
        }
        let shape = cfg.block_shape();
        for l in 0..cfg.n_layers {
            for (suffix, dims) in shape.tensor_dims() {
                specs.push((format!("blocks.{l}.{suffix}"), dims));
            }
        }
        specs.push(("final_norm".into(), vec![d]));
        specs.push(("head".into(), vec![d, cfg.v_img]));
        specs
    }

    /// Zero weights (norm gains included); see [`Transformer::init`] for a trainable start.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::zeros(&Self::param_specs(&cfg))?;
        Self::from_store(cfg, store)
    }

    /// Normal(0, 0.02) embeddings and projections, unit norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(cfg)?;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let entries = m.store.entries().to_vec();
        for e in entries {
            let is_norm = e.name.ends_with("norm");
            for v in &mut m.store.data_mut()[e.range()] {
                *v = if is_norm { T::one() } else { T::of(normal.sample(rng)) };
            }
        }
        Ok(m)
    }

    /// Wraps an existing store; names and shapes must match the config exactly.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let specs = Self::param_specs(&cfg);
        if specs.len() != store.entries().len() {
            return Err(NepError::Corruption(format!(
                "expected {} tensors, found {}",
                specs.len(),
                store.entries().len()
            )));
        }
        for ((name, dims), e) in specs.iter().zip(store.entries()) {
            if *name != e.name || *dims != e.dims {
                return Err(NepError::Corruption(format!(
                    "tensor {} {:?} where {name} {dims:?} was expected",
                    e.name, e.dims
                )));
            }
        }
        let off = |n: &str| store.entry(n).map(|e| e.offset);
        let blocks = (0..cfg.n_layers)
            .map(|l| off(&format!("blocks.{l}.attn_norm")).expect("block present"))
            .collect();
        let block_len = cfg.block_shape().tensor_dims().iter().map(|(_, d)| d.iter().product::<usize>()).sum();
        let idx = Index {
            text_emb: off("text_emb").expect("text_emb"),
            text_pos: off("text_pos").expect("text_pos"),
            img_emb: off("img_emb").expect("img_emb"),
            order_pe: off("order_pe"),
            sog: off("sog"),
            segment: off("segment").expect("segment"),
            mask_emb: off("mask_emb"),
            blocks,
            block_len,
            final_norm: off("final_norm").expect("final_norm"),
            head: off("head").expect("head"),
        };
        Ok(Self { cfg, store, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Same weights with the mask codebook added (fresh normal(0, 0.02) init for the two rows).
    pub fn with_edit_extension<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        if self.cfg.edit_extension {
            return Ok(self.clone());
        }
        let mut ext = Self::init(self.cfg.with_edit_extension(), rng)?;
        ext.store.copy_matching(&self.store);
        Ok(ext)
    }

    fn block_weights(&self, l: usize) -> BlockWeights<'_, T> {
        let o = self.idx.blocks[l];
        BlockWeights::from_flat(&self.cfg.block_shape(), &self.store.data()[o..o + self.idx.block_len])
    }

    fn row(&self, offset: usize, i: usize) -> &[T] {
        let d = self.cfg.d_model;
        &self.store.data()[offset + i * d..offset + (i + 1) * d]
    }

    /// Sinusoidal code of a raster position (used only without the learned order table).
    fn fixed_position(&self, pos: usize, out: &mut [T]) {
        let d = self.cfg.d_model;
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[2 * i] += T::of((pos as f64 * freq).sin());
            out[2 * i + 1] += T::of((pos as f64 * freq).cos());
        }
    }

    fn check_token(&self, tok: &InputToken) -> Result<()> {
        let bad = |m: String| Err(NepError::Config(m));
        match *tok {
            InputToken::Prefix(PrefixSlot { token, pos }) => match token {
                PrefixToken::Text(id) if id as usize >= self.cfg.v_txt => bad(format!("text id {id} ≥ {}", self.cfg.v_txt)),
                PrefixToken::Text(_) if pos >= self.cfg.text_len => bad(format!("text slot {pos} ≥ {}", self.cfg.text_len)),
                PrefixToken::Source(id) if id as usize >= self.cfg.v_img => bad(format!("image id {id} ≥ {}", self.cfg.v_img)),
                PrefixToken::Mask(_) if self.idx.mask_emb.is_none() => {
                    bad("mask conditioning needs the edit extension".into())
                }
                PrefixToken::Source(_) | PrefixToken::Placeholder | PrefixToken::Mask(_) if pos >= self.cfg.grid_len => {
                    bad(format!("grid slot {pos} ≥ {}", self.cfg.grid_len))
                }
                _ => Ok(()),
            },
            InputToken::Gen { prev, target_pos } => {
                if target_pos >= self.cfg.grid_len {
                    return bad(format!("target position {target_pos} ≥ {}", self.cfg.grid_len));
                }
                match prev {
                    Some(id) if id as usize >= self.cfg.v_img => bad(format!("image id {id} ≥ {}", self.cfg.v_img)),
                    _ => Ok(()),
                }
            }
        }
    }

    /// Parameter rows summed into `tok`'s embedding, plus fixed position codes.
    fn embed(&self, tok: &InputToken, out: &mut [T], params: &mut Vec<usize>) {
        let d = self.cfg.d_model;
        params.clear();
        let grid_pe = |pos: usize, params: &mut Vec<usize>| -> bool {
            match self.idx.order_pe {
                Some(o) => {
                    params.push(o + pos * d);
                    true
                }
                None => false,
            }
        };
        let mut fixed = None;
        match *tok {
            InputToken::Prefix(PrefixSlot { token, pos }) => {
                params.push(self.idx.segment + token.tag() as usize * d);
                match token {
                    PrefixToken::Text(id) => {
                        params.push(self.idx.text_emb + id as usize * d);
                        params.push(self.idx.text_pos + pos * d);
                    }
                    PrefixToken::Source(id) => {
                        params.push(self.idx.img_emb + id as usize * d);
                        if !grid_pe(pos, params) {
                            fixed = Some(pos);
                        }
                    }
                    PrefixToken::Placeholder => {
                        if !grid_pe(pos, params) {
                            fixed = Some(pos);
                        }
                    }
                    PrefixToken::Mask(sel) => {
                        let m = self.idx.mask_emb.expect("checked by check_token");
                        let row = match sel {
                            MaskSelector::Unedit => 0,
                            MaskSelector::Edit => 1,
                        };
                        params.push(m + row * d);
                        if !grid_pe(pos, params) {
                            fixed = Some(pos);
                        }
                    }
                }
            }
            InputToken::Gen { prev, target_pos } => {
                match prev {
                    Some(id) => params.push(self.idx.img_emb + id as usize * d),
                    None => {
                        if let Some(s) = self.idx.sog {
                            params.push(s);
                        }
                    }
                }
                if !grid_pe(target_pos, params) {
                    fixed = Some(target_pos);
                }
            }
        }
        out.iter_mut().for_each(|v| *v = T::zero());
        let data = self.store.data();
        for &p in params.iter() {
            for (o, &w) in out.iter_mut().zip(&data[p..p + d]) {
                *o += w;
            }
        }
        if let Some(pos) = fixed {
            self.fixed_position(pos, out);
        }
    }

    fn embed_all(&self, inputs: &[InputToken], sources: Option<&mut Vec<Vec<usize>>>) -> Result<Vec<T>> {
        let d = self.cfg.d_model;
        let mut x = vec![T::zero(); inputs.len() * d];
        let mut params = Vec::with_capacity(4);
        let mut sources = sources;
        for (tok, row) in inputs.iter().zip(x.chunks_exact_mut(d)) {
            self.check_token(tok)?;
            self.embed(tok, row, &mut params);
            if let Some(s) = sources.as_deref_mut() {
                s.push(params.clone());
            }
        }
        Ok(x)
    }

    fn head_logits(&self, h: &[T], rows: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.cfg.d_model;
        let v = self.cfg.v_img;
        let gain = self.row(self.idx.final_norm, 0);
        let mut normed = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        rms_norm_forward(h, gain, &mut normed, &mut rstd);
        let mut logits = vec![T::zero(); rows * v];
        let head = &self.store.data()[self.idx.head..self.idx.head + d * v];
        gemm(&mut logits, &normed, head, rows, d, v, false, false, T::zero());
        (logits, normed, rstd)
    }

    fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        if layout.grid_len != self.cfg.grid_len {
            return Err(NepError::Config(format!(
                "layout over {} tokens, model expects {}",
                layout.grid_len, self.cfg.grid_len
            )));
        }
        if layout.steps() == 0 {
            return Err(NepError::Layout("layout has no generation steps".into()));
        }
        Ok(())
    }

    fn forward_trace(&self, layout: &SequenceLayout) -> Result<(TrainForward<T>, Trace<T>)> {
        self.check_layout(layout)?;
        let teacher = layout
            .teacher_ids
            .as_deref()
            .ok_or_else(|| NepError::Layout("training forward needs teacher ids".into()))?;
        if teacher.len() != layout.steps() {
            return Err(NepError::Layout("teacher stream length differs from step count".into()));
        }
        let inputs = layout_inputs(layout, Some(teacher));
        let d = self.cfg.d_model;
        let shape = self.cfg.block_shape();
        let mut x = self.embed_all(&inputs, None)?;
        let mut records = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let mut rec = BlockRecord::default();
            x = block_forward(&shape, &self.block_weights(l), &x, &mut LayerCache::new(), true, Some(&mut rec));
            records.push(rec);
        }
        let p = layout.prefix_len();
        let g = layout.steps();
        let final_in = x[p * d..].to_vec();
        let (logits, final_out, final_rstd) = self.head_logits(&final_in, g);
        let logits = Tensor::new(vec![g, self.cfg.v_img], logits)?;
        let ce = cross_entropy(&logits, teacher, &vec![1.0; g])?;
        let fwd = TrainForward { logits, loss: ce.loss, nll: ce.nll };
        Ok((fwd, Trace { inputs, records, final_in, final_rstd, final_out, prefix_len: p }))
    }

    /// Teacher-forced logits and mean loss over the generation steps only.
    pub fn forward_train(&self, layout: &SequenceLayout) -> Result<TrainForward<T>> {
        Ok(self.forward_trace(layout)?.0)
    }

    /// Forward plus the gradient of `grad_scale · Σ_steps nll` w.r.t. every parameter.
    pub fn loss_and_grad(&self, layout: &SequenceLayout, grad_scale: f64) -> Result<(TrainForward<T>, Vec<T>)> {
        let (fwd, trace) = self.forward_trace(layout)?;
        let teacher = layout.teacher_ids.as_deref().expect("checked in forward");
        let d = self.cfg.d_model;
        let v = self.cfg.v_img;
        let g = layout.steps();
        let mut grads = vec![T::zero(); self.store.len()];

        // d(scale · Σ nll)/d logits = scale · (softmax − onehot).
        let mut dlogits = vec![T::zero(); g * v];
        for i in 0..g {
            let probs = crate::nn::softmax_f64(fwd.logits.row(i));
            for (j, p) in probs.iter().enumerate() {
                let onehot = if j as u32 == teacher[i] { 1.0 } else { 0.0 };
                dlogits[i * v + j] = T::of(grad_scale * (p - onehot));
            }
        }
        let head_off = self.idx.head;
        gemm(&mut grads[head_off..head_off + d * v], &trace.final_out, &dlogits, d, g, v, true, false, T::one());
        let mut dnormed = vec![T::zero(); g * d];
        let head = &self.store.data()[head_off..head_off + d * v];
        gemm(&mut dnormed, &dlogits, head, g, v, d, false, true, T::zero());
        let total_rows = trace.inputs.len();
        let mut dx = vec![T::zero(); total_rows * d];
        {
            let fn_off = self.idx.final_norm;
            let gain = self.row(fn_off, 0);
            let mut dgain = vec![T::zero(); d];
            rms_norm_backward(
                &dnormed,
                &trace.final_in,
                gain,
                &trace.final_rstd,
                &mut dx[trace.prefix_len * d..],
                &mut dgain,
            );
            for (a, b) in grads[fn_off..fn_off + d].iter_mut().zip(dgain) {
                *a += b;
            }
        }
        let shape = self.cfg.block_shape();
        for l in (0..self.cfg.n_layers).rev() {
            let o = self.idx.blocks[l];
            let mut bg = BlockGrads::from_flat(&shape, &mut grads[o..o + self.idx.block_len]);
            dx = block_backward(&shape, &self.block_weights(l), &trace.records[l], &dx, &mut bg);
        }
        let mut params = Vec::with_capacity(4);
        let mut scratch = vec![T::zero(); d];
        for (tok, drow) in trace.inputs.iter().zip(dx.chunks_exact(d)) {
            self.embed(tok, &mut scratch, &mut params);
            for &p in &params {
                for (a, &b) in grads[p..p + d].iter_mut().zip(drow) {
                    *a += b;
                }
            }
        }
        Ok((fwd, grads))
    }

    /// Runs `inputs` through every layer appending to `caches`; returns logits of the last
    /// `want_last` rows (`[want_last × V_img]`).
    pub fn forward_cached(&self, inputs: &[InputToken], caches: &mut [LayerCache<T>], want_last: usize) -> Result<Vec<T>> {
        if caches.len() != self.cfg.n_layers {
            return Err(NepError::Config("one cache per layer required".into()));
        }
        let d = self.cfg.d_model;
        let shape = self.cfg.block_shape();
        let mut x = self.embed_all(inputs, None)?;
        for (l, cache) in caches.iter_mut().enumerate() {
            x = block_forward(&shape, &self.block_weights(l), &x, cache, true, None);
        }
        let n = inputs.len();
        let want = want_last.min(n);
        let (logits, _, _) = self.head_logits(&x[(n - want) * d..], want);
        Ok(logits)
    }

    /// Cache-free forward of a whole input sequence; logits of the last row.
    pub fn last_logits_uncached(&self, inputs: &[InputToken]) -> Result<Vec<T>> {
        let mut caches = self.new_caches(inputs.len());
        self.forward_cached(inputs, &mut caches, 1)
    }

    pub fn new_caches(&self, rows: usize) -> Vec<LayerCache<T>> {
        (0..self.cfg.n_layers).map(|_| LayerCache::with_capacity(rows, self.cfg.d_model)).collect()
    }

    /// Per-tensor parameter counts, in storage order.
    pub fn count_params(&self) -> ParamCounts {
        let tensors = self.store.counts();
        let get = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, c)| *c).unwrap_or(0);
        ParamCounts {
            total: self.store.len(),
            edit_extension: get("mask_emb"),
            order_extension: get("order_pe") + get("sog"),
            tensors,
        }
    }

    /// Element ranges of the mask codebook (frozen-trunk fine-tuning trains only these).
    pub fn edit_extension_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.store.entry("mask_emb").map(|e| vec![e.range()]).unwrap_or_default()
    }

    pub fn segment_row(&self, tag: SegmentTag) -> &[T] {
        self.row(self.idx.segment, tag as usize)
    }
}

impl Transformer<f32> {
    /// Widened copy for high-precision checks.
    pub fn to_f64(&self) -> Transformer<f64> {
        let mut store = ParamStore::<f64>::zeros(&Transformer::<f64>::param_specs(&self.cfg)).expect("same specs");
        for (dst, &src) in store.data_mut().iter_mut().zip(self.store.data()) {
            *dst = src as f64;
        }
        Transformer::from_store(self.cfg, store).expect("same specs")
    }
}

/// Exact parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub tensors: Vec<(String, usize)>,
    pub total: usize,
    /// Mask codebook size (`2·d` when present).
    pub edit_extension: usize,
    /// Order table plus start embedding (`L·d + d` when present).
    pub order_extension: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_pretrain_layout, GenerationOrder, TextTokens};
    use crate::tokenizer::TokenGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 24,
            v_img: 8,
            v_txt: 8,
            grid_len: 4,
            text_len: 3,
            order_aware: true,
            edit_extension: false,
        }
    }

    #[test]
    fn desk_parameter_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = Transformer::<f32>::init(ModelConfig::default(), &mut rng).unwrap();
        let c = base.count_params();
        assert_eq!(c.order_extension, 64 * 128 + 128);
        assert_eq!(c.tensors.iter().find(|(n, _)| n == "order_pe").unwrap().1, 8192);
        let ext = base.with_edit_extension(&mut rng).unwrap();
        assert_eq!(ext.num_params() - base.num_params(), 256);
        assert_eq!(ext.count_params().edit_extension, 256);
        let sum: usize = ext.count_params().tensors.iter().map(|(_, n)| n).sum();
        assert_eq!(sum, ext.num_params());
    }

    #[test]
    fn extension_keeps_existing_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Transformer::<f32>::init(tiny(), &mut rng).unwrap();
        let ext = base.with_edit_extension(&mut rng).unwrap();
        for e in base.store().entries() {
            assert_eq!(base.store().get(&e.name), ext.store().get(&e.name), "{}", e.name);
        }
    }

    #[test]
    fn fresh_model_loss_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig { v_img: 64, ..tiny() };
        let m = Transformer::<f32>::init(cfg, &mut rng).unwrap();
        let g = TokenGrid::new(vec![3, 9, 27, 60], 2, 2).unwrap();
        let l = build_pretrain_layout(&TextTokens::empty(3), &g, &GenerationOrder::identity(4)).unwrap();
        let f = m.forward_train(&l).unwrap();
        assert!((f.loss - 64f64.ln()).abs() < 0.15, "{}", f.loss);
    }

    #[test]
    fn mask_tokens_need_the_extension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Transformer::<f32>::init(tiny(), &mut rng).unwrap();
        let tok = InputToken::Prefix(PrefixSlot { token: PrefixToken::Mask(MaskSelector::Edit), pos: 0 });
        assert!(matches!(m.last_logits_uncached(&[tok]), Err(NepError::Config(_))));
    }

    #[test]
    fn wrong_store_shape_is_corruption() {
        let store = ParamStore::<f32>::zeros(&[("text_emb".into(), vec![1, 1])]).unwrap();
        assert!(matches!(Transformer::from_store(tiny(), store), Err(NepError::Corruption(_))));
    }
}
