use crate::error::{NepError, Result};
use crate::nn::{Real, Tensor};

/// Weighted cross-entropy result with the gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Weighted mean of `-log softmax(logits)[target]`.
    pub loss: f64,
    /// Per-row negative log-likelihood (unweighted).
    pub nll: Vec<f64>,
    pub grad: Tensor<T>,
}

/// Weighted mean cross-entropy over rows of `logits`. A weight of zero excludes a row.
/// When every weight is zero the loss is zero.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[u32],
    position_weights: &[f64],
) -> Result<CrossEntropy<T>> {
    let v = logits.cols();
    let n = logits.rows();
    if targets.len() != n || position_weights.len() != n {
        return Err(NepError::Input(format!(
            "cross_entropy: {n} rows but {} targets and {} weights",
            targets.len(),
            position_weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(NepError::Input(format!("target {bad} outside vocabulary of {v}")));
    }
    let wsum: f64 = position_weights.iter().sum();
    let mut grad = Tensor::zeros(logits.dims().to_vec());
    let mut nll = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let probs = softmax_f64(row);
        let t = targets[i] as usize;
        let l = -probs[t].ln();
        nll.push(l);
        let w = position_weights[i];
        if wsum > 0.0 && w != 0.0 {
            total += w * l;
            let scale = w / wsum;
            let g = grad.row_mut(i);
            for (j, p) in probs.iter().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                g[j] = T::of(scale * (p - onehot));
            }
        }
    }
    let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
    Ok(CrossEntropy { loss, nll, grad })
}

/// Numerically stable softmax accumulated in `f64`.
pub fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for p in &mut out {
        *p /= s;
    }
    out
}

/// `log softmax(row)[idx]` in `f64`.
pub fn log_prob<T: Real>(row: &[T], idx: usize) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
    row[idx].f64() - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f32>::zeros(vec![3, 64]);
        let ce = cross_entropy(&logits, &[0, 5, 63], &[1.0; 3]).unwrap();
        assert!((ce.loss - 64f64.ln()).abs() < 1e-9);
        assert!((ce.loss - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn loss_shrinks_monotonically_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0f32, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let mut row = vec![0.0f32; 5];
            row[2] = margin;
            let logits = Tensor::new(vec![1, 5], row).unwrap();
            let l = cross_entropy(&logits, &[2], &[1.0]).unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn zero_weights_exclude_rows() {
        let logits = Tensor::new(vec![2, 2], vec![0.0f32, 0.0, 5.0, -5.0]).unwrap();
        let ce = cross_entropy(&logits, &[0, 1], &[1.0, 0.0]).unwrap();
        assert!((ce.loss - 2f64.ln()).abs() < 1e-9);
        assert!(ce.grad.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_vocabulary_target_is_an_input_error() {
        let logits = Tensor::<f32>::zeros(vec![1, 4]);
        assert!(matches!(cross_entropy(&logits, &[4], &[1.0]), Err(NepError::Input(_))));
    }
}
