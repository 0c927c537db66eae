use crate::error::{dim_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Orthonormal DCT-II basis, row `k` holding frequency `k` over `n` samples.
fn dct_basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// `[to, from]` operator: forward DCT at length `from`, keep the lowest
/// `to` coefficients scaled by `sqrt(to / from)`, inverse DCT at length `to`.
fn resample_matrix(from: usize, to: usize) -> Vec<f64> {
    let (cf, ct) = (dct_basis(from), dct_basis(to));
    let scale = (to as f64 / from as f64).sqrt();
    let mut r = vec![0.0; to * from];
    for i in 0..to {
        for j in 0..from {
            r[i * from + j] = scale * (0..to).map(|k| ct[k * to + i] * cf[k * from + j]).sum::<f64>();
        }
    }
    r
}

fn apply_axis<T: Scalar>(data: &[T], shape: [usize; 3], axis: usize, to: usize) -> Vec<T> {
    let from = shape[axis];
    let r: Vec<T> = resample_matrix(from, to).into_iter().map(lit).collect();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * to * inner];
    for o in 0..outer {
        for i in 0..to {
            let dst = (o * to + i) * inner;
            for j in 0..from {
                let w = r[i * from + j];
                let src = (o * from + j) * inner;
                for k in 0..inner {
                    out[dst + k] += w * data[src + k];
                }
            }
        }
    }
    out
}

/// Low-pass resamples a `[D, H, W]` volume to `target` by truncating its 3-D
/// DCT-II spectrum. Orthonormal scaling keeps constant volumes constant.
pub fn dct_downsample<T: Scalar>(volume: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(dim_err!("DCT down-sampling expects [D, H, W], got {s:?}"));
    }
    if (0..3).any(|a| target[a] == 0 || target[a] > s[a]) {
        return Err(dim_err!("DCT target {target:?} exceeds source {s:?}"));
    }
    let mut shape = [s[0], s[1], s[2]];
    let mut data = volume.to_vec();
    for axis in 0..3 {
        data = apply_axis(&data, shape, axis, target[axis]);
        shape[axis] = target[axis];
    }
    Tensor::new(&shape, data)
}
