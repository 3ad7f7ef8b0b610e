//! Grad-CAM over a grid-aligned critic feature map.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};

/// Feature map `A` (`[cells × channels]`, raster order), `∂y/∂A` of the same shape, and `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamTrace {
    pub cells: usize,
    pub channels: usize,
    pub features: Vec<f64>,
    pub grad: Vec<f64>,
    pub score: f64,
}

/// A scalar critic exposing its last grid-aligned feature map.
pub trait SaliencyCritic {
    fn trace(&self, img: &RgbImage, caption: &str) -> Result<CamTrace>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamReport {
    /// Channel weights: spatial mean of `∂y/∂A_c`.
    pub alpha: Vec<f64>,
    /// `ReLU(Σ_c α_c A_c)` per cell, raster order.
    pub saliency: Vec<f64>,
    pub score: f64,
}

pub fn grad_cam_from_trace(t: &CamTrace) -> Result<GradCamReport> {
    let n = t.cells * t.channels;
    if t.cells == 0 || t.features.len() != n || t.grad.len() != n {
        return Err(NepError::Input("feature map and gradient shapes disagree".into()));
    }
    let mut alpha = vec![0.0; t.channels];
    for cell in t.grad.chunks_exact(t.channels) {
        for (a, g) in alpha.iter_mut().zip(cell) {
            *a += g / t.cells as f64;
        }
    }
    let saliency = t
        .features
        .chunks_exact(t.channels)
        .map(|cell| cell.iter().zip(&alpha).map(|(f, a)| f * a).sum::<f64>().max(0.0))
        .collect();
    Ok(GradCamReport { alpha, saliency, score: t.score })
}

pub fn grad_cam_scores(critic: &impl SaliencyCritic, img: &RgbImage, caption: &str) -> Result<GradCamReport> {
    grad_cam_from_trace(&critic.trace(img, caption)?)
}

/// The `k` cells with the smallest saliency (lowest index first among equals), ascending.
pub fn propose_revision(report: &GradCamReport, k: usize) -> Result<Vec<usize>> {
    let l = report.saliency.len();
    if k > l {
        return Err(NepError::Config(format!("revision size {k} exceeds {l} tokens")));
    }
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&a, &b| report.saliency[a].total_cmp(&report.saliency[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}
