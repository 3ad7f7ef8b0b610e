//! Pixel distances, analytic proxy features, directional similarity and Fréchet distance.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::scene::{read_grid, Color, Quadrant, SceneSpec, Shape, GRID};
use crate::error::{NepError, Result};
use crate::sequence::WORDS;
use crate::tokenizer::{encode_image, TokenGrid, TokenizerConfig};

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub l1: f64,
    pub l2: f64,
}

/// Mean absolute and mean squared difference over RGB channels scaled to [0, 1].
pub fn pixel_metrics(a: &RgbImage, b: &RgbImage) -> Result<PixelMetrics> {
    if a.dimensions() != b.dimensions() {
        return Err(NepError::Input(format!("images are {:?} and {:?}", a.dimensions(), b.dimensions())));
    }
    let n = a.as_raw().len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (x, y) in a.as_raw().iter().zip(b.as_raw()) {
        let d = (*x as f64 - *y as f64) / 255.0;
        l1 += d.abs();
        l2 += d * d;
    }
    Ok(PixelMetrics { l1: l1 / n, l2: l2 / n })
}

/// Per-quadrant palette histograms (cell fractions) followed by per-shape object counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyFeatures(pub Vec<f64>);

pub const HIST_BINS: usize = 64;
pub const PROXY_DIM: usize = 4 * HIST_BINS + 3;

pub fn grid_features(grid: &TokenGrid) -> ProxyFeatures {
    let mut f = vec![0.0; PROXY_DIM];
    let per_quadrant = (GRID * GRID / 4) as f64;
    for (i, &id) in grid.ids.iter().enumerate() {
        let q = Quadrant::of_cell(i / GRID, i % GRID) as usize;
        f[q * HIST_BINS + id as usize % HIST_BINS] += 1.0 / per_quadrant;
    }
    for (shape, _) in read_grid(grid).objects() {
        f[4 * HIST_BINS + shape.index()] += 1.0;
    }
    ProxyFeatures(f)
}

pub fn image_features(img: &RgbImage, tok: &TokenizerConfig) -> Result<ProxyFeatures> {
    super::scene::check_world(tok)?;
    Ok(grid_features(&encode_image(img, tok)?))
}

/// Bag of words over the instruction grammar.
pub fn text_features(text: &str) -> Vec<f64> {
    let mut f = vec![0.0; WORDS.len()];
    for w in text.split_whitespace() {
        if let Some(i) = WORDS.iter().position(|x| *x == w) {
            f[i] += 1.0;
        }
    }
    f
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NepError::Input(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(NepError::UndefinedSimilarity("zero-length feature vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn feature_similarity(a: &RgbImage, b: &RgbImage, tok: &TokenizerConfig) -> Result<f64> {
    cosine(&image_features(a, tok)?.0, &image_features(b, tok)?.0)
}

/// Keyword-indicator space shared by images and captions: object colour, shape,
/// colour-shape pair and background colour counts.
pub const KEYWORD_DIM: usize = 11 + 3 + 33 + 11;

fn keyword_vector(objects: &[(Shape, Color)], background: Option<Color>) -> Vec<f64> {
    let mut v = vec![0.0; KEYWORD_DIM];
    for &(s, c) in objects {
        v[c.index()] += 1.0;
        v[11 + s.index()] += 1.0;
        v[14 + c.index() * 3 + s.index()] += 1.0;
    }
    if let Some(bg) = background {
        v[47 + bg.index()] += 1.0;
    }
    v
}

pub fn image_keywords(grid: &TokenGrid) -> Vec<f64> {
    let r = read_grid(grid);
    keyword_vector(&r.objects(), r.background())
}

pub fn caption_keywords(caption: &str) -> Result<Vec<f64>> {
    let spec = SceneSpec::parse_caption(caption)?;
    let objects: Vec<(Shape, Color)> = spec.objects.iter().map(|o| (o.shape, o.color)).collect();
    Ok(keyword_vector(&objects, Some(spec.background)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    /// `None` when either delta is zero.
    pub dir_sim: Option<f64>,
    pub out_sim: f64,
}

/// Cosine between the image delta and the caption delta, plus output-to-caption cosine.
pub fn directional_metrics(src: &TokenGrid, out: &TokenGrid, src_caption: &str, tgt_caption: &str) -> Result<Directional> {
    let (fs, fo) = (image_keywords(src), image_keywords(out));
    let (gs, gt) = (caption_keywords(src_caption)?, caption_keywords(tgt_caption)?);
    let df: Vec<f64> = fo.iter().zip(&fs).map(|(a, b)| a - b).collect();
    let dg: Vec<f64> = gt.iter().zip(&gs).map(|(a, b)| a - b).collect();
    let dir_sim = match cosine(&df, &dg) {
        Ok(v) => Some(v),
        Err(NepError::UndefinedSimilarity(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Directional { dir_sim, out_sim: cosine(&fo, &gt)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FrechetStats {
    /// Mean and unbiased covariance of the rows.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(NepError::Input(format!("{} samples; at least 2 needed", rows.len())));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(NepError::Input("feature rows must share a non-zero length".into()));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Eigenvalues of a symmetric matrix, computed on a copy scaled to unit max entry.
fn sym_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.amax();
    if scale == 0.0 {
        return Ok((DVector::zeros(m.nrows()), DMatrix::identity(m.nrows(), m.ncols())));
    }
    let e = SymmetricEigen::new(sym / scale);
    if e.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(NepError::Numeric("eigendecomposition did not converge".into()));
    }
    Ok((e.eigenvalues * scale, e.eigenvectors))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m)?;
    let roots = vals.map(|v| if v < EIG_CLAMP { 0.0 } else { v.sqrt() });
    Ok(&vecs * DMatrix::from_diagonal(&roots) * vecs.transpose())
}

/// `|μA − μB|² + Tr(ΣA + ΣB − 2 (ΣA ΣB)^½)`, with the trace term taken as
/// `Tr((√ΣA ΣB √ΣA)^½)`, which is symmetric and shares the eigenvalues of `(ΣA ΣB)^½`.
/// Dimensions with zero variance in both sets are dropped from the covariance terms.
pub fn frechet_from_stats(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(NepError::Input("feature sets differ in dimension".into()));
    }
    let diff = &a.mean - &b.mean;
    let active: Vec<usize> = (0..a.mean.len()).filter(|&j| a.cov[(j, j)] > 0.0 || b.cov[(j, j)] > 0.0).collect();
    let n = active.len();
    let ca = DMatrix::from_fn(n, n, |i, j| a.cov[(active[i], active[j])]);
    let cb = DMatrix::from_fn(n, n, |i, j| b.cov[(active[i], active[j])]);
    let sa = psd_sqrt(&ca)?;
    let (vals, _) = sym_eigen(&(&sa * &cb * &sa))?;
    let cross: f64 = vals.iter().map(|&v| if v < EIG_CLAMP { 0.0 } else { v.sqrt() }).sum();
    let d = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(NepError::Numeric(format!("Fréchet distance evaluated to {d}")));
    }
    Ok(d.max(0.0))
}

pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    frechet_from_stats(&FrechetStats::from_features(set_a)?, &FrechetStats::from_features(set_b)?)
}
