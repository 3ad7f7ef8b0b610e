use image::{Rgb, RgbImage};
use nep_core::data::*;
use nep_core::model::{ModelConfig, SamplerConfig, Transformer};
use nep_core::sequence::TextVocab;
use nep_core::tokenizer::{decode_tokens, encode_image, TokenizerConfig};
use nep_core::NepError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([r.gen(), r.gen(), r.gen()]))
}

proptest! {
    #[test]
    fn pixel_metrics_match_brute_force(sa in 0u64..500, sb in 0u64..500, w in 1u32..9, h in 1u32..9) {
        let (a, b) = (noisy(sa, w, h), noisy(sb + 7919, w, h));
        let got = pixel_metrics(&a, &b).unwrap();
        let (mut l1, mut l2, mut n) = (0.0f64, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let d = (a.get_pixel(x, y)[c] as f64 - b.get_pixel(x, y)[c] as f64) / 255.0;
                    l1 += d.abs();
                    l2 += d * d;
                    n += 1;
                }
            }
        }
        prop_assert!((got.l1 - l1 / n as f64).abs() < 1e-9);
        prop_assert!((got.l2 - l2 / n as f64).abs() < 1e-9);
    }

    #[test]
    fn cosine_matches_brute_force(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        match cosine(&a, &b) {
            Ok(c) => prop_assert!((c - dot / (na * nb)).abs() < 1e-9),
            Err(_) => prop_assert!(na == 0.0 || nb == 0.0),
        }
    }
}

#[test]
fn pixel_extremes() {
    let b = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
    let w = RgbImage::from_pixel(32, 32, Rgb([255, 255, 255]));
    let m = pixel_metrics(&b, &w).unwrap();
    assert_eq!((m.l1, m.l2), (1.0, 1.0));
    assert!(matches!(pixel_metrics(&b, &noisy(0, 8, 8)), Err(NepError::Input(_))));
}

#[test]
fn disjoint_uniform_images_have_orthogonal_features() {
    let tok = TokenizerConfig::default();
    let red = RgbImage::from_pixel(32, 32, Rgb([255, 0, 0]));
    let blue = RgbImage::from_pixel(32, 32, Rgb([0, 0, 255]));
    assert_eq!(feature_similarity(&red, &blue, &tok).unwrap(), 0.0);
    assert!((feature_similarity(&red, &red, &tok).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(NepError::UndefinedSimilarity(_))));
}

fn scene(objects: &[(Shape, Color, Quadrant)], background: Color) -> SceneSpec {
    let spec = SceneSpec { objects: objects.iter().map(|&(s, c, q)| SceneObject::new(s, c, q)).collect(), background };
    spec.validate().unwrap();
    spec
}

#[test]
fn directional_similarity_rewards_the_requested_change() {
    let src = scene(&[(Shape::Square, Color::Red, Quadrant::TopLeft)], Color::Blue);
    let tgt = scene(&[(Shape::Square, Color::Green, Quadrant::TopLeft)], Color::Blue);
    let wrong = scene(&[(Shape::Square, Color::Yellow, Quadrant::TopLeft)], Color::Blue);
    let (sc, tc) = (src.caption(), tgt.caption());

    let perfect = directional_metrics(&src.grid(), &tgt.grid(), &sc, &tc).unwrap();
    assert!((perfect.dir_sim.unwrap() - 1.0).abs() < 1e-12);
    assert!((perfect.out_sim - 1.0).abs() < 1e-12);

    let anti = directional_metrics(&src.grid(), &wrong.grid(), &sc, &tc).unwrap();
    assert!(anti.dir_sim.unwrap() < perfect.dir_sim.unwrap());
    assert!(anti.out_sim < perfect.out_sim);

    let idle = directional_metrics(&src.grid(), &src.grid(), &sc, &tc).unwrap();
    assert_eq!(idle.dir_sim, None);
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let a: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| vec![x]).collect();
    let b: Vec<Vec<f64>> = [0.0, 4.0, 8.0].iter().map(|&x| vec![x]).collect();
    let stats = |v: &[Vec<f64>]| {
        let n = v.len() as f64;
        let m = v.iter().map(|r| r[0]).sum::<f64>() / n;
        let var = v.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
    let want = (ma - mb).powi(2) + (sa - sb).powi(2);
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
}

#[test]
fn frechet_identity_and_translation() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let v = [0.5, -1.0, 2.0, 0.0, 0.25];
    let b: Vec<Vec<f64>> = a.iter().map(|row| row.iter().zip(&v).map(|(x, d)| x + d).collect()).collect();
    let norm2: f64 = v.iter().map(|d| d * d).sum();
    assert!((frechet_distance(&a, &b).unwrap() - norm2).abs() < 1e-6);
    assert!(FrechetStats::from_features(&a[..1]).is_err());
}

#[test]
fn shards_are_byte_identical_across_runs() {
    for kind in [ShardKind::T2i, ShardKind::Edit] {
        assert_eq!(make_dataset(kind, 20, 9).unwrap(), make_dataset(kind, 20, 9).unwrap());
        assert_ne!(make_dataset(kind, 20, 9).unwrap(), make_dataset(kind, 20, 10).unwrap());
    }
}

#[test]
fn edit_ops_are_uniform() {
    let n = 1000;
    let triples = edit_triples(n, 4);
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    for op in EditOp::ALL {
        let k = triples.iter().filter(|t| t.op == op).count() as f64;
        assert!((k - n as f64 / 4.0).abs() <= 3.0 * sigma, "{op:?}: {k}");
    }
}

#[test]
fn scenes_round_trip_through_the_tokenizer() {
    let tok = TokenizerConfig::default();
    for s in t2i_scenes(50, 8) {
        let img = s.render(&tok).unwrap();
        assert_eq!(encode_image(&img, &tok).unwrap(), s.grid());
        assert_eq!(decode_tokens(&s.grid(), &tok).unwrap(), img);
        assert_eq!(SceneSpec::parse_caption(&s.caption()).unwrap().grid(), s.grid());
    }
}

#[test]
fn targets_differ_from_sources_only_inside_the_mask() {
    let tok = TokenizerConfig::default();
    for t in edit_triples(200, 5) {
        let m = t.edit_mask(&tok).unwrap();
        let (a, b) = (t.source.grid(), t.target.grid());
        assert!(m.edit_count() > 0);
        for i in 0..a.len() {
            if !m.patch[i] {
                assert_eq!(a.ids[i], b.ids[i], "{:?} changed patch {i}", t.op);
            }
        }
        assert_ne!(a, b);
    }
}

#[test]
fn benchmark_is_deterministic_and_counts_steps() {
    let cfg = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 32, edit_extension: true, ..ModelConfig::default() };
    let model = Transformer::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (tok, vocab) = (TokenizerConfig::default(), TextVocab::default());
    let triples = edit_triples(6, 77);
    let s = SamplerConfig::default();
    let a = run_benchmark(&model, &tok, &vocab, &triples, BenchMode::Nep, &s, 5).unwrap();
    let b = run_benchmark(&model, &tok, &vocab, &triples, BenchMode::Nep, &s, 5).unwrap();
    assert_eq!(a, b);
    for p in &a.per_sample {
        assert_eq!(p.steps, p.l_e);
    }
    let full = run_benchmark(&model, &tok, &vocab, &triples, BenchMode::NtpFull, &s, 5).unwrap();
    assert!(full.per_sample.iter().all(|p| p.steps == 64));
    assert_eq!(full.aggregate.mean_steps, 64.0);
    assert!(run_benchmark(&model, &tok, &vocab, &[], BenchMode::Nep, &s, 5).is_err());
}

#[test]
fn frechet_on_sparse_proxy_features() {
    let feats = |seed| -> Vec<Vec<f64>> { t2i_scenes(300, seed).iter().map(|s| grid_features(&s.grid()).0).collect() };
    let (a, b) = (feats(1), feats(2));
    let (sa, sb) = (FrechetStats::from_features(&a).unwrap(), FrechetStats::from_features(&b).unwrap());
    let mean_term = (&sa.mean - &sb.mean).norm_squared();
    let d = frechet_distance(&a, &b).unwrap();
    assert!(d.is_finite() && d >= mean_term - 1e-9, "{d} < {mean_term}");
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);

    let shift: Vec<f64> = (0..PROXY_DIM).map(|j| if j % 7 == 0 { 0.1 } else { 0.0 }).collect();
    let moved: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
    let norm2: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &moved).unwrap() - norm2).abs() < 1e-6);
}
