//! Caption-conditioned convolutional critic over decoded pixels.
//!
//! `patch conv (p×p, stride p) → ReLU → [· ⧺ caption map] → 3×3 conv → ReLU → 3×3 conv → ReLU = A`,
//! then global average pooling, a linear head and a sigmoid. `A` has one cell per token.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::scene::{check_world, random_scene, scene_match, Color, Quadrant, SceneObject, SceneSpec, Shape, GRID};
use crate::data::shard::sample_rng;
use crate::error::{NepError, Result};
use crate::model::{decode_tensor_file, encode_tensor_file, raw_from_store, store_from_raw};
use crate::nn::{adamw_step, gemm, AdamState, OptimizerConfig, ParamStore};
use crate::tokenizer::{decode_tokens, TokenGrid, TokenizerConfig};

use super::gradcam::{CamTrace, SaliencyCritic};

/// Per-cell caption channels: the quadrant's object colour (11) and shape (3), a presence
/// flag, the background colour (11), and the cell's row and column within its quadrant (4 + 4).
pub const CAPTION_CHANNELS: usize = 11 + 3 + 1 + 11 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub patch: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { patch: 4, c1: 16, c2: 32, c3: 16 }
    }
}

impl CriticConfig {
    fn specs(&self) -> Vec<(String, Vec<usize>)> {
        let in1 = self.patch * self.patch * 3;
        let in2 = 9 * (self.c1 + CAPTION_CHANNELS);
        let in3 = 9 * self.c2;
        [
            ("conv1.w", vec![in1, self.c1]),
            ("conv1.b", vec![self.c1]),
            ("conv2.w", vec![in2, self.c2]),
            ("conv2.b", vec![self.c2]),
            ("conv3.w", vec![in3, self.c3]),
            ("conv3.b", vec![self.c3]),
            ("head.w", vec![self.c3]),
            ("head.b", vec![1]),
        ]
        .into_iter()
        .map(|(n, d)| (n.to_string(), d))
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    cfg: CriticConfig,
    store: ParamStore<f32>,
}

const CELLS: usize = GRID * GRID;

struct Weights<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: &'a [f64],
    wh: &'a [f64],
    bh: f64,
}

/// Activations kept for the backward pass.
struct Forward {
    x1: Vec<f64>,
    h1: Vec<f64>,
    x2: Vec<f64>,
    h2: Vec<f64>,
    x3: Vec<f64>,
    a: Vec<f64>,
    pooled: Vec<f64>,
    y: f64,
}

/// Caption map `[cells × CAPTION_CHANNELS]`.
pub fn caption_map(spec: &SceneSpec) -> Vec<f64> {
    let mut m = vec![0.0; CELLS * CAPTION_CHANNELS];
    for cell in 0..CELLS {
        let (r, c) = (cell / GRID, cell % GRID);
        let row = &mut m[cell * CAPTION_CHANNELS..(cell + 1) * CAPTION_CHANNELS];
        if let Some(o) = spec.object_in(Quadrant::of_cell(r, c)) {
            row[o.color.index()] = 1.0;
            row[11 + o.shape.index()] = 1.0;
            row[14] = 1.0;
        }
        row[15 + spec.background.index()] = 1.0;
        row[26 + r % (GRID / 2)] = 1.0;
        row[30 + c % (GRID / 2)] = 1.0;
    }
    m
}

/// 3×3 zero-padded neighbourhoods: `[cells × 9·ch]`.
fn im2col3(x: &[f64], ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; CELLS * 9 * ch];
    for r in 0..GRID {
        for c in 0..GRID {
            let dst = &mut out[(r * GRID + c) * 9 * ch..][..9 * ch];
            for k in 0..9 {
                let (rr, cc) = (r as isize + k as isize / 3 - 1, c as isize + k as isize % 3 - 1);
                if (0..GRID as isize).contains(&rr) && (0..GRID as isize).contains(&cc) {
                    let src = (rr as usize * GRID + cc as usize) * ch;
                    dst[k * ch..(k + 1) * ch].copy_from_slice(&x[src..src + ch]);
                }
            }
        }
    }
    out
}

fn col2im3(dcols: &[f64], ch: usize) -> Vec<f64> {
    let mut dx = vec![0.0; CELLS * ch];
    for r in 0..GRID {
        for c in 0..GRID {
            let src = &dcols[(r * GRID + c) * 9 * ch..][..9 * ch];
            for k in 0..9 {
                let (rr, cc) = (r as isize + k as isize / 3 - 1, c as isize + k as isize % 3 - 1);
                if (0..GRID as isize).contains(&rr) && (0..GRID as isize).contains(&cc) {
                    let dst = (rr as usize * GRID + cc as usize) * ch;
                    for (d, s) in dx[dst..dst + ch].iter_mut().zip(&src[k * ch..(k + 1) * ch]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

fn dense_relu(x: &[f64], w: &[f64], b: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..CELLS).flat_map(|_| b.iter().copied()).collect();
    gemm(&mut out, x, w, CELLS, k, n, false, false, 1.0);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Critic {
    pub fn init<R: Rng + ?Sized>(cfg: CriticConfig, rng: &mut R) -> Result<Self> {
        if cfg.patch == 0 || cfg.c1 == 0 || cfg.c2 == 0 || cfg.c3 == 0 {
            return Err(NepError::Config(format!("degenerate critic config {cfg:?}")));
        }
        let mut store = ParamStore::<f32>::zeros(&cfg.specs())?;
        for e in store.entries().to_vec() {
            if e.name.ends_with(".w") {
                let fan_in = e.dims[0] as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                for v in &mut store.data_mut()[e.range()] {
                    *v = normal.sample(rng) as f32;
                }
            }
        }
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn pixels(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let p = self.cfg.patch;
        if img.width() as usize != GRID * p || img.height() as usize != GRID * p {
            return Err(NepError::Input(format!("critic expects {0}×{0} images", GRID * p)));
        }
        let mut x = vec![0.0; CELLS * p * p * 3];
        for cell in 0..CELLS {
            let (r, c) = (cell / GRID, cell % GRID);
            let row = &mut x[cell * p * p * 3..(cell + 1) * p * p * 3];
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.get_pixel((c * p + dx) as u32, (r * p + dy) as u32).0;
                    for ch in 0..3 {
                        row[(dy * p + dx) * 3 + ch] = px[ch] as f64 / 255.0;
                    }
                }
            }
        }
        Ok(x)
    }

    fn forward(&self, w: &Weights<'_>, x1: Vec<f64>, cap: &[f64]) -> Forward {
        let c = &self.cfg;
        let h1 = dense_relu(&x1, w.w1, w.b1, x1.len() / CELLS, c.c1);
        let z_ch = c.c1 + CAPTION_CHANNELS;
        let mut z = vec![0.0; CELLS * z_ch];
        for cell in 0..CELLS {
            z[cell * z_ch..cell * z_ch + c.c1].copy_from_slice(&h1[cell * c.c1..(cell + 1) * c.c1]);
            z[cell * z_ch + c.c1..(cell + 1) * z_ch]
                .copy_from_slice(&cap[cell * CAPTION_CHANNELS..(cell + 1) * CAPTION_CHANNELS]);
        }
        let x2 = im2col3(&z, z_ch);
        let h2 = dense_relu(&x2, w.w2, w.b2, 9 * z_ch, c.c2);
        let x3 = im2col3(&h2, c.c2);
        let a = dense_relu(&x3, w.w3, w.b3, 9 * c.c2, c.c3);
        let mut pooled = vec![0.0; c.c3];
        for cell in 0..CELLS {
            for (p, v) in pooled.iter_mut().zip(&a[cell * c.c3..(cell + 1) * c.c3]) {
                *p += v / CELLS as f64;
            }
        }
        let zlogit = w.bh + pooled.iter().zip(w.wh).map(|(a, b)| a * b).sum::<f64>();
        Forward { x1, h1, x2, h2, x3, a, pooled, y: sigmoid(zlogit) }
    }

    fn with_weights<R>(&self, f: impl FnOnce(&Weights<'_>) -> R) -> R {
        let flat: Vec<f64> = self.store.data().iter().map(|&v| v as f64).collect();
        self.with_flat(&flat, f)
    }

    fn with_flat<R>(&self, flat: &[f64], f: impl FnOnce(&Weights<'_>) -> R) -> R {
        let part = |name: &str| &flat[self.store.entry(name).expect("critic tensor").range()];
        let w = Weights {
            w1: part("conv1.w"),
            b1: part("conv1.b"),
            w2: part("conv2.w"),
            b2: part("conv2.b"),
            w3: part("conv3.w"),
            b3: part("conv3.b"),
            wh: part("head.w"),
            bh: part("head.b")[0],
        };
        f(&w)
    }

    fn run(&self, img: &RgbImage, caption: &SceneSpec) -> Result<Forward> {
        let x1 = self.pixels(img)?;
        let cap = caption_map(caption);
        Ok(self.with_weights(|w| self.forward(w, x1, &cap)))
    }

    /// Predicted caption agreement in [0, 1].
    pub fn score(&self, img: &RgbImage, caption: &str) -> Result<f64> {
        Ok(self.run(img, &SceneSpec::parse_caption(caption)?)?.y)
    }

    pub fn score_grid(&self, grid: &TokenGrid, caption: &str, tok: &TokenizerConfig) -> Result<f64> {
        self.score(&decode_tokens(grid, tok)?, caption)
    }

    /// Squared error against `target` and its parameter gradient (scaled by `scale`).
    pub fn loss_and_grad(&self, img: &RgbImage, caption: &SceneSpec, target: f64, scale: f64) -> Result<(f64, Vec<f64>)> {
        let flat: Vec<f64> = self.store.data().iter().map(|&v| v as f64).collect();
        self.loss_and_grad_at(&flat, img, caption, target, scale)
    }

    /// [`Critic::loss_and_grad`] with the parameters supplied in f64 (same layout as the store).
    pub fn loss_and_grad_at(&self, params: &[f64], img: &RgbImage, caption: &SceneSpec, target: f64, scale: f64) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.store.len() {
            return Err(NepError::Input(format!("{} parameters for a critic of {}", params.len(), self.store.len())));
        }
        let x1 = self.pixels(img)?;
        let cap = caption_map(caption);
        let c = self.cfg;
        self.with_flat(params, |w| {
            let f = self.forward(w, x1, &cap);
            let loss = (f.y - target).powi(2);
            let mut grad = vec![0.0; self.store.len()];
            let dz = scale * 2.0 * (f.y - target) * f.y * (1.0 - f.y);
            let range = |n: &str| self.store.entry(n).expect("critic tensor").range();
            grad[range("head.b")][0] = dz;
            for (g, p) in grad[range("head.w")].iter_mut().zip(&f.pooled) {
                *g = dz * p;
            }
            let mut da: Vec<f64> = (0..CELLS).flat_map(|_| w.wh.iter().map(|v| v * dz / CELLS as f64)).collect();
            let dpre3 = relu_back(&mut da, &f.a);
            let z_ch = c.c1 + CAPTION_CHANNELS;
            let dh2_cols = backprop_dense(&mut grad, range("conv3.w"), range("conv3.b"), &f.x3, dpre3, w.w3, 9 * c.c2, c.c3);
            let mut dh2 = col2im3(&dh2_cols, c.c2);
            let dpre2 = relu_back(&mut dh2, &f.h2);
            let dz_cols = backprop_dense(&mut grad, range("conv2.w"), range("conv2.b"), &f.x2, dpre2, w.w2, 9 * z_ch, c.c2);
            let dz_map = col2im3(&dz_cols, z_ch);
            let mut dh1: Vec<f64> = (0..CELLS).flat_map(|cell| dz_map[cell * z_ch..cell * z_ch + c.c1].to_vec()).collect();
            let dpre1 = relu_back(&mut dh1, &f.h1);
            let k1 = f.x1.len() / CELLS;
            backprop_dense(&mut grad, range("conv1.w"), range("conv1.b"), &f.x1, dpre1, w.w1, k1, c.c1);
            Ok((loss, grad))
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({ "kind": "critic", "config": self.cfg, "param_count": self.store.len() });
        encode_tensor_file(&header, &raw_from_store(&self.store))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, raw) = decode_tensor_file(bytes)?;
        if header["kind"] != "critic" {
            return Err(NepError::Corruption(format!("checkpoint kind {} is not a critic", header["kind"])));
        }
        let cfg: CriticConfig = serde_json::from_value(header["config"].clone())
            .map_err(|e| NepError::Corruption(format!("critic header: {e}")))?;
        let store = store_from_raw(&cfg.specs(), raw)?;
        if header["param_count"] != store.len() {
            return Err(NepError::Corruption("parameter count differs from header".into()));
        }
        Ok(Self { cfg, store })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn relu_back(d: &mut [f64], out: &[f64]) -> Vec<f64> {
    d.iter().zip(out).map(|(g, o)| if *o > 0.0 { *g } else { 0.0 }).collect()
}

/// Accumulates weight/bias gradients of `out = x·w + b` and returns `d x`.
#[allow(clippy::too_many_arguments)]
fn backprop_dense(
    grad: &mut [f64],
    w_range: std::ops::Range<usize>,
    b_range: std::ops::Range<usize>,
    x: &[f64],
    dout: Vec<f64>,
    w: &[f64],
    k: usize,
    n: usize,
) -> Vec<f64> {
    gemm(&mut grad[w_range], x, &dout, k, CELLS, n, true, false, 1.0);
    let gb = &mut grad[b_range];
    for row in dout.chunks_exact(n) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dx = vec![0.0; CELLS * k];
    gemm(&mut dx, &dout, w, CELLS, n, k, false, true, 0.0);
    dx
}

impl SaliencyCritic for Critic {
    fn trace(&self, img: &RgbImage, caption: &str) -> Result<CamTrace> {
        let f = self.run(img, &SceneSpec::parse_caption(caption)?)?;
        let c3 = self.cfg.c3;
        let scale = f.y * (1.0 - f.y) / CELLS as f64;
        let wh: Vec<f64> = self.store.get("head.w").expect("head").iter().map(|&v| v as f64).collect();
        let grad = (0..CELLS).flat_map(|_| wh.iter().map(move |w| w * scale)).collect();
        Ok(CamTrace { cells: CELLS, channels: c3, features: f.a, grad, score: f.y })
    }
}

/// One critic training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticExample {
    pub grid: TokenGrid,
    pub caption: SceneSpec,
    pub score: f64,
}

/// Rendered scenes with caption-violating corruptions, labelled with the analytic match score.
pub fn critic_examples(count: usize, seed: u64) -> Vec<CriticExample> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let spec = random_scene(&mut rng);
            let mut grid = spec.grid();
            let mut caption = spec.clone();
            let corruptions = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..=3) };
            for _ in 0..corruptions {
                corrupt(&mut grid, &mut caption, &mut rng);
            }
            let score = scene_match(&grid, &caption);
            CriticExample { grid, caption, score }
        })
        .collect()
}

fn corrupt<R: Rng + ?Sized>(grid: &mut TokenGrid, caption: &mut SceneSpec, rng: &mut R) {
    let colour = |rng: &mut R| Color::ALL.choose(rng).expect("colours").token();
    match rng.gen_range(0..5) {
        0 => {
            for _ in 0..rng.gen_range(1..=6) {
                let p = rng.gen_range(0..grid.len());
                grid.ids[p] = if rng.gen_bool(0.8) { colour(rng) } else { rng.gen_range(0..64) };
            }
        }
        1 => {
            // Repaint one object's footprint.
            if let Some(o) = caption.objects.choose(rng) {
                let id = colour(rng);
                for p in o.positions() {
                    grid.ids[p] = id;
                }
            }
        }
        2 => {
            // Stray object in an empty quadrant.
            let q = *Quadrant::ALL.choose(rng).expect("quadrants");
            if caption.object_in(q).is_none() {
                let s = *Shape::ALL.choose(rng).expect("shapes");
                for p in SceneObject::new(s, Color::Red, q).positions() {
                    grid.ids[p] = colour(rng);
                }
            }
        }
        3 => {
            // Caption describes a different scene.
            *caption = random_scene(rng);
        }
        _ => {
            // Footprint of a different shape at an object's place.
            if let Some(o) = caption.objects.choose(rng).copied() {
                for p in o.positions() {
                    grid.ids[p] = caption.background.token();
                }
                let s = *Shape::ALL.choose(rng).expect("shapes");
                for p in SceneObject::new(s, o.color, o.quadrant).positions() {
                    grid.ids[p] = o.color.token();
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 3e-3, seed: 0 }
    }
}

/// Mean squared error regression onto the example scores; returns the per-step losses.
pub fn train_critic(critic: &mut Critic, examples: &[CriticExample], cfg: &CriticTrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(NepError::Input("critic training needs examples and a positive batch".into()));
    }
    let tok = TokenizerConfig::default();
    check_world(&tok)?;
    let images = examples.iter().map(|e| decode_tokens(&e.grid, &tok)).collect::<Result<Vec<_>>>()?;
    let opt = OptimizerConfig { lr: cfg.lr, ..OptimizerConfig::default() };
    let mut state = AdamState::new(critic.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let mut grad = vec![0.0f64; critic.num_params()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..examples.len());
            let (l, g) = critic.loss_and_grad(&images[i], &examples[i].caption, examples[i].score, 1.0 / cfg.batch_size as f64)?;
            loss += l / cfg.batch_size as f64;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !loss.is_finite() {
            return Err(NepError::NonFiniteLoss { step: t, detail: "critic regression".into() });
        }
        let g32: Vec<f32> = grad.iter().map(|&v| v as f32).collect();
        adamw_step(critic.store_mut().data_mut(), &g32, &mut state, &opt, t as u64);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean squared error of the critic on `examples`.
pub fn critic_mse(critic: &Critic, examples: &[CriticExample]) -> Result<f64> {
    let tok = TokenizerConfig::default();
    let mut total = 0.0;
    for e in examples {
        let y = critic.score_grid(&e.grid, &e.caption.caption(), &tok)?;
        total += (y - e.score).powi(2);
    }
    Ok(total / examples.len().max(1) as f64)
}
