use image::RgbImage;
use nep_core::data::{random_scene, sample_rng};
use nep_core::model::{decode, ModelConfig, SamplerConfig, Transformer};
use nep_core::sequence::{build_edit_layout_with, EditLayoutOptions, GenerationOrder, TextTokens, TextVocab};
use nep_core::tokenizer::{EditMask, TokenGrid, TokenizerConfig};
use nep_core::tts::*;
use nep_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `y = w · mean_cells(A)` with a single channel `A_cell = mean red of the cell's patch`.
struct LinearCritic {
    w: f64,
}

impl SaliencyCritic for LinearCritic {
    fn trace(&self, img: &RgbImage, _caption: &str) -> Result<CamTrace> {
        let features: Vec<f64> = (0..64)
            .map(|cell| {
                let (r, c) = (cell / 8, cell % 8);
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        s += img.get_pixel((c * 4 + x) as u32, (r * 4 + y) as u32).0[0] as f64;
                    }
                }
                s / (16.0 * 255.0)
            })
            .collect();
        let score = self.w * features.iter().sum::<f64>() / 64.0;
        Ok(CamTrace { cells: 64, channels: 1, features, grad: vec![self.w / 64.0; 64], score })
    }
}

/// Same reward for every image.
struct ConstantCritic;

impl SaliencyCritic for ConstantCritic {
    fn trace(&self, _img: &RgbImage, _caption: &str) -> Result<CamTrace> {
        Ok(CamTrace { cells: 64, channels: 1, features: vec![1.0; 64], grad: vec![0.0; 64], score: 0.5 })
    }
}

fn noisy(seed: u64) -> RgbImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(32, 32, |_, _| image::Rgb([r.gen(), r.gen(), r.gen()]))
}

fn edit_model() -> Transformer<f32> {
    let cfg = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 32, edit_extension: true, ..ModelConfig::default() };
    Transformer::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
}

fn small_critic(seed: u64) -> Critic {
    Critic::init(CriticConfig { patch: 4, c1: 4, c2: 6, c3: 4 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn linear_critic_saliency_is_each_cells_contribution() {
    for seed in 0..5 {
        let img = noisy(seed);
        let c = LinearCritic { w: 1.7 };
        let t = c.trace(&img, "").unwrap();
        let r = grad_cam_scores(&c, &img, "").unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for (s, a) in r.saliency.iter().zip(&t.features) {
            let want = 1.7 * a / 64.0;
            diff += (s - want).powi(2);
            norm += want * want;
        }
        assert!((diff / norm).sqrt() < 1e-5);
        assert!((r.alpha[0] - 1.7 / 64.0).abs() < 1e-15);
        let flipped = grad_cam_scores(&LinearCritic { w: -1.7 }, &img, "").unwrap();
        assert!(flipped.saliency.iter().all(|&s| s == 0.0));
    }
}

#[test]
fn constant_feature_map_gives_equal_saliency() {
    let img = RgbImage::from_pixel(32, 32, image::Rgb([90, 10, 10]));
    let r = grad_cam_scores(&LinearCritic { w: 1.0 }, &img, "").unwrap();
    assert!(r.saliency.iter().all(|&s| (s - r.saliency[0]).abs() < 1e-15));
    assert_eq!(propose_revision(&r, 5).unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn trained_critic_trace_gradient_matches_head() {
    let critic = small_critic(1);
    let spec = random_scene(&mut sample_rng(0, 0));
    let img = spec.render(&TokenizerConfig::default()).unwrap();
    let t = critic.trace(&img, &spec.caption()).unwrap();
    let r = grad_cam_from_trace(&t).unwrap();
    assert!(r.saliency.iter().all(|&s| s >= 0.0));
    assert_eq!(r.saliency.len(), 64);
    assert!((critic.score(&img, &spec.caption()).unwrap() - t.score).abs() < 1e-15);
}

proptest! {
    #[test]
    fn proposal_is_a_full_sort_prefix(scores in prop::collection::vec(0u8..6, 64), k in 0usize..=64) {
        let saliency: Vec<f64> = scores.iter().map(|&s| s as f64 * 0.25).collect();
        let report = GradCamReport { alpha: vec![], saliency: saliency.clone(), score: 0.0 };
        let got = propose_revision(&report, k).unwrap();
        let mut all: Vec<(f64, usize)> = saliency.iter().copied().zip(0..).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn proposal_bounds() {
    let report = GradCamReport { alpha: vec![], saliency: vec![0.3; 64], score: 0.0 };
    assert!(propose_revision(&report, 0).unwrap().is_empty());
    assert_eq!(propose_revision(&report, 64).unwrap(), (0..64).collect::<Vec<_>>());
    assert!(propose_revision(&report, 65).is_err());
}

fn start_grid(seed: u64) -> (TokenGrid, String) {
    let spec = random_scene(&mut sample_rng(seed, 0));
    let mut g = spec.grid();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10 {
        let p = r.gen_range(0..64);
        g.ids[p] = r.gen_range(0..64);
    }
    (g, spec.caption())
}

#[test]
fn zero_k_and_constant_critic_leave_the_grid_alone() {
    let model = edit_model();
    let tok = TokenizerConfig::default();
    let vocab = TextVocab::default();
    let (grid, caption) = start_grid(1);
    let critic = small_critic(2);
    let refiner = Refiner { model: &model, tok: &tok, vocab: &vocab, critic: &critic, sampler: SamplerConfig::default(), parallel: false };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let step = refiner.refine_once(&grid, &caption, &RefineConfig { k: 0, ..Default::default() }, &mut rng).unwrap();
    assert!(!step.accepted);
    assert_eq!(step.steps, 0);
    assert_eq!(step.grid, grid);

    let constant = Refiner { critic: &ConstantCritic, model: &model, tok: &tok, vocab: &vocab, sampler: SamplerConfig::default(), parallel: false };
    for seed in 0..5 {
        let cfg = RefineConfig { k: 8, candidates: 1, ..Default::default() };
        let step = constant.refine_once(&grid, &caption, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(!step.accepted);
        assert_eq!(step.grid, grid);
        assert_eq!(step.steps, 8);
    }
}

#[test]
fn chosen_candidate_is_the_best_of_independent_reruns() {
    let model = edit_model();
    let tok = TokenizerConfig::default();
    let vocab = TextVocab::default();
    let critic = small_critic(3);
    let refiner = Refiner { model: &model, tok: &tok, vocab: &vocab, critic: &critic, sampler: SamplerConfig::default(), parallel: false };
    for seed in 0..6 {
        let (grid, caption) = start_grid(seed);
        let cfg = RefineConfig { k: 12, candidates: 4, rounds: 1, mask_previous: seed % 2 == 0 };
        let step = refiner.refine_once(&grid, &caption, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(step.candidates.len(), 4);
        let text = TextTokens::encode(&caption, &vocab, 16).unwrap();
        let mask = EditMask::from_positions(&step.positions, &tok).unwrap();
        let mut best = f64::NEG_INFINITY;
        for c in &step.candidates {
            let opts = EditLayoutOptions { order: Some(GenerationOrder::new(c.order.clone(), 64).unwrap()), mask_previous: cfg.mask_previous };
            let layout = build_edit_layout_with(&text, &grid, Some(&mask), None, &opts).unwrap();
            let out = decode(&model, &layout, &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(c.seed)).unwrap();
            let mut g = grid.clone();
            for (&p, &id) in c.order.iter().zip(&out.ids) {
                g.ids[p] = id;
            }
            assert_eq!(g, c.grid);
            let reward = refiner.reward(&g, &caption).unwrap();
            assert_eq!(reward, c.reward);
            best = best.max(reward);
            for p in 0..64 {
                if !step.positions.contains(&p) {
                    assert_eq!(c.grid.ids[p], grid.ids[p]);
                }
            }
        }
        if step.accepted {
            assert_eq!(step.reward, best);
            assert!(best > step.prev_reward);
        } else {
            assert_eq!(step.grid, grid);
            assert!(best <= step.prev_reward);
        }
    }
}

#[test]
fn trajectories_are_monotone_and_parallel_safe() {
    let model = edit_model();
    let tok = TokenizerConfig::default();
    let vocab = TextVocab::default();
    let critic = small_critic(5);
    let serial = Refiner { model: &model, tok: &tok, vocab: &vocab, critic: &critic, sampler: SamplerConfig::default(), parallel: false };
    let parallel = Refiner { parallel: true, ..serial };
    let (grid, caption) = start_grid(9);
    let cfg = RefineConfig { k: 10, candidates: 3, rounds: 4, mask_previous: true };
    let a = serial.refine_loop(&grid, &caption, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = parallel.refine_loop(&grid, &caption, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5);
    for w in a.windows(2) {
        assert!(w[1].reward >= w[0].reward);
        if !w[1].accepted {
            assert_eq!(w[1].grid, w[0].grid);
        }
    }
    let none = serial.refine_loop(&grid, &caption, &RefineConfig { rounds: 0, ..cfg }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(none.len(), 1);
    assert!(serial.refine_loop(&grid, &caption, &RefineConfig { candidates: 0, ..cfg }, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn critic_checkpoint_round_trips_and_training_fits() {
    let mut critic = small_critic(7);
    let bytes = critic.encode().unwrap();
    let back = Critic::decode(&bytes).unwrap();
    assert_eq!(back.store().data(), critic.store().data());
    assert!(Critic::decode(&bytes[..bytes.len() - 1]).is_err());

    let examples = critic_examples(64, 3);
    let before = critic_mse(&critic, &examples).unwrap();
    let cfg = CriticTrainConfig { steps: 150, batch_size: 16, lr: 3e-3, seed: 0 };
    let losses = train_critic(&mut critic, &examples, &cfg).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let after = critic_mse(&critic, &examples).unwrap();
    assert!(after < before, "{before} -> {after}");
}
