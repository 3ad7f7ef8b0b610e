//! Randomized finite-difference cases, one generator per differentiable op.
//! Each returns the norm-wise relative error between analytic and numeric gradients.

use super::*;
use nep_core::model::{ModelConfig, Transformer};
use nep_core::nn::*;
use nep_core::sequence::*;
use nep_core::tokenizer::{EditMask, TokenGrid, TokenizerConfig};
use rand::Rng;

pub fn rms_norm_case<T: Real>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let min_d = if std::mem::size_of::<T>() == 4 { 2 } else { 1 };
    let d = r.gen_range(min_d..=9);
    let rows = r.gen_range(1..=4);
    let x: Vec<T> = random_vec(&mut r, rows * d, 2.0);
    let gain: Vec<T> = (0..d).map(|_| T::of(1.0 + r.gen_range(-0.5..0.5))).collect();
    let proj: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eval = |x: &[T], gain: &[T]| -> f64 {
        let mut out = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        rms_norm_forward(x, gain, &mut out, &mut rstd);
        out.iter().zip(&proj).map(|(a, b)| a.f64() * b).sum()
    };
    let mut out = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    rms_norm_forward(&x, &gain, &mut out, &mut rstd);
    let dy: Vec<T> = proj.iter().map(|&v| T::of(v)).collect();
    let mut dx = vec![T::zero(); rows * d];
    let mut dg = vec![T::zero(); d];
    rms_norm_backward(&dy, &x, &gain, &rstd, &mut dx, &mut dg);
    let (h, _) = fd_setting::<T>();
    let nx = finite_difference(&x, h, |x| eval(x, &gain));
    let ng = finite_difference(&gain, h, |g| eval(&x, g));
    rel_err(&dx, &nx).max(rel_err(&dg, &ng))
}

pub fn cross_entropy_case<T: Real>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..=5);
    let v = r.gen_range(2..=9);
    let logits: Vec<T> = random_vec(&mut r, n * v, 3.0);
    let targets: Vec<u32> = (0..n).map(|_| r.gen_range(0..v) as u32).collect();
    let weights: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { r.gen_range(0.0..2.0) }).collect();
    let eval = |l: &[T]| {
        let t = Tensor::new(vec![n, v], l.to_vec()).unwrap();
        cross_entropy(&t, &targets, &weights).unwrap().loss
    };
    let t = Tensor::new(vec![n, v], logits.clone()).unwrap();
    let ce = cross_entropy(&t, &targets, &weights).unwrap();
    let (h, _) = fd_setting::<T>();
    rel_err(ce.grad.data(), &finite_difference(&logits, h, eval))
}

pub fn block_case<T: Real>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let heads = r.gen_range(1..=3);
    let d = heads * r.gen_range(1..=3) * 2;
    let shape = BlockShape { d_model: d, n_heads: heads, ffn_dim: r.gen_range(2..=10) };
    let n = r.gen_range(1..=5);
    let causal = r.gen_bool(0.7);
    let mut flat: Vec<T> = Vec::new();
    for (name, dims) in shape.tensor_dims() {
        let k: usize = dims.iter().product();
        for _ in 0..k {
            let v = if name.ends_with("norm") { 1.0 + r.gen_range(-0.3..0.3) } else { r.gen_range(-0.6..0.6) };
            flat.push(T::of(v));
        }
    }
    let x: Vec<T> = random_vec(&mut r, n * d, 1.0);
    let proj: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let loss = |flat: &[T], x: &[T]| -> f64 {
        let w = BlockWeights::from_flat(&shape, flat);
        let out = block_forward(&shape, &w, x, &mut LayerCache::new(), causal, None);
        out.iter().zip(&proj).map(|(a, b)| a.f64() * b).sum()
    };
    let w = BlockWeights::from_flat(&shape, &flat);
    let mut rec = BlockRecord::default();
    block_forward(&shape, &w, &x, &mut LayerCache::new(), causal, Some(&mut rec));
    let mut grads = vec![T::zero(); flat.len()];
    let dout: Vec<T> = proj.iter().map(|&v| T::of(v)).collect();
    let dx = {
        let mut g = BlockGrads::from_flat(&shape, &mut grads);
        block_backward(&shape, &w, &rec, &dout, &mut g)
    };
    let (h, _) = fd_setting::<T>();
    let num_x = finite_difference(&x, h, |x| loss(&flat, x));
    let num_w = finite_difference(&flat, h, |f| loss(f, &x));
    rel_err(&dx, &num_x).max(rel_err(&grads, &num_w))
}

pub fn tiny_config(edit: bool, order_aware: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 12,
        v_img: 6,
        v_txt: 5,
        grid_len: 4,
        text_len: 3,
        order_aware,
        edit_extension: edit,
    }
}

/// A 2×2 grid world matching [`tiny_config`].
pub fn tiny_tokenizer() -> TokenizerConfig {
    TokenizerConfig { image_h: 2, image_w: 2, patch: 1, palette: (0..6).map(|i| [i * 40, 0, 0]).collect() }
}

pub fn random_model<T: Real>(cfg: ModelConfig, r: &mut rand_chacha::ChaCha8Rng) -> Transformer<T> {
    let mut m = Transformer::<T>::zeros(cfg).unwrap();
    let entries = m.store().entries().to_vec();
    for e in entries {
        let norm = e.name.ends_with("norm");
        for v in &mut m.store_mut().data_mut()[e.range()] {
            *v = T::of(if norm { 1.0 + r.gen_range(-0.3..0.3) } else { r.gen_range(-0.5..0.5) });
        }
    }
    m
}

/// Random pretrain or editing layout over the tiny world.
pub fn random_layout(r: &mut rand_chacha::ChaCha8Rng, edit: bool) -> SequenceLayout {
    let text = TextTokens::from_ids({
        let words = r.gen_range(0..=3);
        let mut ids = vec![PAD; 3 - words];
        ids.extend((0..words).map(|_| r.gen_range(1..5)));
        ids
    })
    .unwrap();
    let grid = TokenGrid::new((0..4).map(|_| r.gen_range(0..6)).collect(), 2, 2).unwrap();
    if edit {
        let source = TokenGrid::new((0..4).map(|_| r.gen_range(0..6)).collect(), 2, 2).unwrap();
        let mut bits: Vec<bool> = (0..4).map(|_| r.gen_bool(0.5)).collect();
        if bits.iter().all(|b| !b) && r.gen_bool(0.5) {
            bits[r.gen_range(0..4)] = true;
        }
        let mask = EditMask::from_patches(bits, &tiny_tokenizer()).unwrap();
        let opts = EditLayoutOptions { order: None, mask_previous: r.gen_bool(0.3) };
        build_edit_layout_with(&text, &source, Some(&mask), Some(&grid), &opts).unwrap()
    } else {
        let order = sample_order(4, r, 0.2);
        build_pretrain_layout(&text, &grid, &order).unwrap()
    }
}

pub fn model_case<T: Real>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let edit = r.gen_bool(0.5);
    let order_aware = !r.gen_bool(0.2);
    let model = random_model::<T>(tiny_config(edit, order_aware), &mut r);
    let layout = random_layout(&mut r, edit);
    let steps = layout.steps() as f64;
    let (_, grads) = model.loss_and_grad(&layout, 1.0 / steps).unwrap();
    let (h, _) = fd_setting::<T>();
    let flat = model.store().data().to_vec();
    let mut probe = model.clone();
    let numeric = finite_difference(&flat, h, |p| {
        probe.store_mut().data_mut().copy_from_slice(p);
        probe.forward_train(&layout).unwrap().loss
    });
    rel_err(&grads, &numeric)
}

/// Critic regression loss against its parameters, evaluated in f64.
pub fn critic_case(seed: u64) -> f64 {
    use nep_core::data::{random_scene, sample_rng};
    use nep_core::tts::{Critic, CriticConfig};
    let mut r = rng(seed);
    let cfg = CriticConfig { patch: 4, c1: r.gen_range(1..=3), c2: r.gen_range(1..=3), c3: r.gen_range(1..=3) };
    let critic = Critic::init(cfg, &mut r).unwrap();
    let spec = random_scene(&mut sample_rng(seed, 1));
    let mut grid = spec.grid();
    for _ in 0..r.gen_range(0..6) {
        let p = r.gen_range(0..64);
        grid.ids[p] = r.gen_range(0..64);
    }
    let img = nep_core::tokenizer::decode_tokens(&grid, &TokenizerConfig::default()).unwrap();
    let target = r.gen_range(0.0..1.0);
    let mut params: Vec<f64> = critic.store().data().iter().map(|&v| v as f64).collect();
    for e in critic.store().entries().iter().filter(|e| e.name.ends_with(".b")) {
        for v in &mut params[e.range()] {
            *v = r.gen_range(-0.5..0.5);
        }
    }
    let (_, grad) = critic.loss_and_grad_at(&params, &img, &spec, target, 1.0).unwrap();
    let (h, _) = fd_setting::<f64>();
    let numeric = finite_difference(&params, h, |p| critic.loss_and_grad_at(p, &img, &spec, target, 1.0).unwrap().0);
    rel_err(&grad, &numeric)
}
