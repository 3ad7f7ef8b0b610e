use crate::nn::{Real, Tensor};

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-5;

/// Row-wise RMS normalization: `y = x / sqrt(mean(x²) + eps) * gain`.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
    let d = x.cols();
    assert_eq!(gain.len(), d, "rms_norm: gain extent");
    let mut out = Tensor::zeros(x.dims().to_vec());
    let mut rstd = vec![T::zero(); x.rows()];
    rms_norm_forward(x.data(), gain.data(), out.data_mut(), &mut rstd);
    out
}

/// Slice form of [`rms_norm`]; writes the per-row reciprocal RMS into `rstd` for the backward pass.
pub fn rms_norm_forward<T: Real>(x: &[T], gain: &[T], out: &mut [T], rstd: &mut [T]) {
    let d = gain.len();
    for ((xr, yr), r) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let ms: f64 = xr.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        *r = T::of(s);
        for ((y, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = T::of(xv.f64() * s * g.f64());
        }
    }
}

/// Accumulates `dx` and `dgain` from upstream `dy`.
pub fn rms_norm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    rstd: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let d = gain.len();
    for (((dyr, xr), dxr), &r) in dy
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let s = r.f64();
        let mut dot = 0.0f64;
        for i in 0..d {
            let gdy = gain[i].f64() * dyr[i].f64();
            dot += gdy * xr[i].f64();
            dgain[i] += T::of(dyr[i].f64() * xr[i].f64() * s);
        }
        let coef = s * s * s * dot / d as f64;
        for i in 0..d {
            let gdy = gain[i].f64() * dyr[i].f64();
            dxr[i] += T::of(s * gdy - xr[i].f64() * coef);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_row_stays_zero() {
        let x = Tensor::<f32>::zeros(vec![1, 8]);
        let g = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        assert!(rms_norm(&x, &g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_row_normalizes_to_one() {
        let x = Tensor::new(vec![2, 4], vec![3.0f32; 8]).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        for v in rms_norm(&x, &g).data() {
            assert!((v - 1.0).abs() < 1e-5, "{v}");
        }
    }
}
