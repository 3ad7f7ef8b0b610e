mod common;

use common::gradcases::{random_layout, random_model, tiny_config};
use common::rng;
use nep_core::model::{decode, decode_forced, layout_inputs, sample_token, InputToken, SamplerConfig, Transformer};
use nep_core::nn::{log_prob, softmax_f64};
use nep_core::sequence::*;
use nep_core::tokenizer::TokenGrid;
use rand::Rng;

/// Decoding by recomputing the whole sequence at every step, no cache.
fn recompute_decode(model: &Transformer<f64>, layout: &SequenceLayout, forced: &[u32], sampler: &SamplerConfig, r: &mut impl Rng) -> Vec<u32> {
    let order = layout.gen_order.positions();
    let mut ids = forced.to_vec();
    while ids.len() < order.len() {
        let mut inputs: Vec<InputToken> = layout.prefix.iter().map(|&s| InputToken::Prefix(s)).collect();
        for (i, &pos) in order.iter().enumerate().take(ids.len() + 1) {
            inputs.push(InputToken::Gen { prev: if i == 0 { None } else { Some(ids[i - 1]) }, target_pos: pos });
        }
        let logits = model.last_logits_uncached(&inputs).unwrap();
        ids.push(sample_token(&logits, sampler, r).unwrap());
    }
    ids
}

#[test]
fn cached_decode_matches_full_recompute() {
    for seed in 0..30u64 {
        let mut r = rng(seed);
        let edit = seed % 2 == 1;
        let model = random_model::<f64>(tiny_config(edit, true), &mut r);
        let layout = random_layout(&mut r, edit);
        let sampler = if seed % 3 == 0 { SamplerConfig::greedy() } else { SamplerConfig { top_k: Some(4), ..Default::default() } };
        let k = r.gen_range(0..=layout.steps());
        let forced: Vec<u32> = layout.teacher_ids.as_ref().unwrap()[..k].to_vec();
        let cached = decode_forced(&model, &layout, &forced, &sampler, &mut rng(seed + 100)).unwrap();
        let reference = recompute_decode(&model, &layout, &forced, &sampler, &mut rng(seed + 100));
        assert_eq!(cached.ids, reference, "seed {seed}");
        assert_eq!(cached.steps, layout.steps() - k);
    }
}

#[test]
fn teacher_forced_loss_equals_stepwise_log_probs() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let edit = seed % 2 == 0;
        let model = random_model::<f64>(tiny_config(edit, seed % 5 != 0), &mut r);
        let layout = random_layout(&mut r, edit);
        let teacher = layout.teacher_ids.clone().unwrap();
        let fwd = model.forward_train(&layout).unwrap();
        let full = layout_inputs(&layout, Some(&teacher));
        for (i, &t) in teacher.iter().enumerate() {
            let logits = model.last_logits_uncached(&full[..layout.prefix_len() + i + 1]).unwrap();
            let lp = log_prob(&logits, t as usize);
            assert!((fwd.nll[i] + lp).abs() < 1e-9, "seed {seed} step {i}");
        }
        if !teacher.is_empty() {
            let mean = fwd.nll.iter().sum::<f64>() / teacher.len() as f64;
            assert!((fwd.loss - mean).abs() < 1e-12);
        }
    }
}

fn all_grids(len: usize, vocab: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out.into_iter().flat_map(|g| (0..vocab).map(move |v| [g.clone(), vec![v]].concat())).collect();
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn every_order_defines_a_normalized_joint_over_grids() {
    let mut r = rng(5);
    let cfg = tiny_config(false, true);
    let model = random_model::<f64>(cfg, &mut r);
    let text = TextTokens::from_ids(vec![PAD, 2, 3]).unwrap();
    let grids = all_grids(4, cfg.v_img as u32);
    let orders = permutations(4);
    assert_eq!(orders.len(), 24);
    for order in orders.iter().step_by(5) {
        let order = GenerationOrder::new(order.clone(), 4).unwrap();
        let mut total = 0.0;
        for g in &grids {
            let grid = TokenGrid::new(g.clone(), 2, 2).unwrap();
            let fwd = model.forward_train(&build_pretrain_layout(&text, &grid, &order).unwrap()).unwrap();
            total += (-fwd.nll.iter().sum::<f64>()).exp();
        }
        assert!((total - 1.0).abs() < 1e-9, "order {:?}: {total}", order.positions());
    }
}

#[test]
fn sampler_frequencies_match_softmax() {
    let mut r = rng(17);
    let logits: Vec<f32> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let temperature = 0.7;
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
    let probs = softmax_f64(&scaled);
    let n = 100_000;
    let mut counts = [0usize; 8];
    let s = SamplerConfig { temperature, ..Default::default() };
    for _ in 0..n {
        counts[sample_token(&logits, &s, &mut r).unwrap() as usize] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?} vs {probs:?}");
    }
}

#[test]
fn random_orders_are_uniform_over_permutations() {
    let mut r = rng(3);
    let perms = permutations(4);
    let n = 10_000;
    let mut counts = vec![0usize; perms.len()];
    for _ in 0..n {
        let o = sample_order(4, &mut r, 0.0);
        counts[perms.iter().position(|p| p == o.positions()).unwrap()] += 1;
    }
    let p = 1.0 / 24.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{c}");
    }
}

#[test]
fn unit_guidance_matches_conditional_decoding() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let model = random_model::<f64>(tiny_config(false, true), &mut r);
        let layout = random_layout(&mut r, false);
        let plain = decode(&model, &layout, &SamplerConfig::greedy(), &mut rng(0)).unwrap();
        let guided = SamplerConfig { cfg_scale: Some(1.0), ..SamplerConfig::greedy() };
        assert_eq!(decode(&model, &layout, &guided, &mut rng(0)).unwrap().ids, plain.ids);
    }
}

#[test]
fn fully_forced_decode_skips_the_model() {
    let mut r = rng(2);
    let model = random_model::<f64>(tiny_config(false, true), &mut r);
    let layout = random_layout(&mut r, false);
    let forced = layout.teacher_ids.clone().unwrap();
    let out = decode_forced(&model, &layout, &forced, &SamplerConfig::default(), &mut r).unwrap();
    assert_eq!(out.ids, forced);
    assert_eq!(out.steps, 0);
    let too_many = [forced.clone(), vec![0]].concat();
    assert!(decode_forced(&model, &layout, &too_many, &SamplerConfig::default(), &mut r).is_err());
}
