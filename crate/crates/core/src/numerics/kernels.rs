//! Dense kernels shared by the eager backend, the autodiff tape and the
//! hard-gate executor.

use crate::error::{shape_err, LpaError, Result};

use super::tensor::{Real, Tensor};

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` in the overflow-safe form `log1p(e^{-|x|}) + max(x, 0)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    (-x.abs()).exp().ln_1p() + x.max(T::zero())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Temperature softmax with max subtraction.
pub fn softmax<T: Real>(x: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return Err(LpaError::Parameter(format!(
            "softmax temperature must be positive, got {:?}",
            temperature
        )));
    }
    let mut out = x.iter().map(|&v| v / temperature).collect::<Vec<_>>();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        total = total + *e;
    }
    for e in v.iter_mut() {
        *e = *e / total;
    }
}

/// Row-wise softmax of a 2-D tensor (temperature 1).
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(shape_err!("matmul {}x{} by {}x{}", m, k, k2, n));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = a.dims();
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Causal depthwise convolution with zero left-padding:
/// `out[t, c] = sum_j kernel[j, c] * x[t - k + 1 + j, c]`.
pub fn causal_dwconv<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims();
    let (k, kd) = kernel.dims();
    if kd != d {
        return Err(shape_err!("dwconv kernel has {} channels, input has {}", kd, d));
    }
    if k == 0 {
        return Err(shape_err!("dwconv kernel needs at least one tap"));
    }
    let mut out = Tensor::zeros(n, d);
    for t in 0..n {
        let orow = out.row_mut(t);
        for j in 0..k {
            // input index t - (k - 1 - j)
            let back = k - 1 - j;
            if back > t {
                continue;
            }
            let xrow = x.row(t - back);
            let krow = kernel.row(j);
            for c in 0..d {
                orow[c] = orow[c] + krow[c] * xrow[c];
            }
        }
    }
    Ok(out)
}

/// Exclusive prefix sums along rows: `C[0] = 0`, `C[t + 1] = C[t] + x[t]`.
pub fn prefix_sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, d) = x.dims();
    let mut out = Tensor::zeros(n + 1, d);
    for t in 0..n {
        let (head, tail) = out.data_mut().split_at_mut((t + 1) * d);
        let prev = &head[t * d..];
        let next = &mut tail[..d];
        for ((o, &p), &v) in next.iter_mut().zip(prev).zip(x.row(t)) {
            *o = p + v;
        }
    }
    out
}

/// Sum of rows `start..=end` read off an exclusive prefix-sum table.
pub fn range_sum<T: Real>(prefix: &Tensor<T>, start: usize, end: usize) -> Vec<T> {
    prefix
        .row(end + 1)
        .iter()
        .zip(prefix.row(start))
        .map(|(&hi, &lo)| hi - lo)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn softmax_uniform_and_cold_limit() {
        let s = softmax(&[0.0f64, 0.0, 0.0], 1.0).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[10.0f64, 0.0], 0.01).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-9 && s[1] < 1e-9);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(matches!(softmax(&[1.0f64], 0.0), Err(LpaError::Parameter(_))));
        assert!(softmax(&[1.0f64], -1.0).is_err());
    }

    #[test]
    fn softmax_matches_naive_exp_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let got = softmax(&x, 1.0).unwrap();
        for (g, v) in got.iter().zip(&x) {
            assert!((g - v.exp() / z).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1.3f64) - (1.0 + 1.3f64.exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-30.0f64, -2.5, 0.0, 0.7, 12.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.4, 0.0, 0.9, 2.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k, n) = (rng.gen_range(1..17), rng.gen_range(1..17), rng.gen_range(1..17));
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a.at(i, p) * b.at(p, j);
                    }
                    assert!((c.at(i, j) - s).abs() < 1e-10);
                }
            }
        }
        assert!(matmul(&Tensor::<f64>::zeros(2, 3), &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn dwconv_hand_example() {
        let x = Tensor::col_vector(vec![1.0f64, 2.0, 3.0, 4.0]);
        let k = Tensor::col_vector(vec![1.0f64, 1.0]);
        let y = causal_dwconv(&x, &k).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn dwconv_last_tap_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 7, 3);
        let k = Tensor::from_fn(5, 3, |j, _| if j == 4 { 1.0 } else { 0.0 });
        assert_eq!(causal_dwconv(&x, &k).unwrap(), x);
    }

    #[test]
    fn dwconv_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 10, 2);
        let k = random(&mut rng, 5, 2);
        let base = causal_dwconv(&x, &k).unwrap();
        let mut x2 = x.clone();
        x2.set(6, 1, 9.0);
        x2.set(6, 0, -9.0);
        let pert = causal_dwconv(&x2, &k).unwrap();
        for t in 0..6 {
            assert_eq!(base.row(t), pert.row(t));
        }
        assert!(base.row(6) != pert.row(6));
    }

    #[test]
    fn dwconv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(4, 3);
        let k = Tensor::<f64>::zeros(5, 2);
        assert!(matches!(causal_dwconv(&x, &k), Err(LpaError::Shape(_))));
    }

    #[test]
    fn prefix_sum_small() {
        let x = Tensor::col_vector(vec![1.0f64, 2.0, 3.0]);
        let c = prefix_sum(&x);
        assert_eq!(c.data(), &[0.0, 1.0, 3.0, 6.0]);
        assert_eq!(range_sum(&c, 1, 2), vec![5.0]);
    }

    #[test]
    fn prefix_ranges_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x64 = random(&mut rng, 100, 8);
        let x32: Tensor<f32> = x64.cast();
        let c64 = prefix_sum(&x64);
        let c32 = prefix_sum(&x32);
        for _ in 0..1000 {
            let s = rng.gen_range(0..100);
            let e = rng.gen_range(s..100);
            let r64 = range_sum(&c64, s, e);
            let r32 = range_sum(&c32, s, e);
            for c in 0..8 {
                let direct64: f64 = (s..=e).map(|t| x64.at(t, c)).sum();
                let direct32: f32 = (s..=e).map(|t| x32.at(t, c)).sum();
                assert!((r64[c] - direct64).abs() < 1e-12);
                assert!((r32[c] - direct32).abs() < 1e-5 * (1.0 + direct32.abs()));
            }
        }
    }
}
