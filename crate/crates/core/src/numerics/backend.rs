use std::marker::PhantomData;

use super::kernels;
use super::tensor::{Real, Tensor};

/// The matrix operations the layers are written against.
///
/// [`Eager`] evaluates immediately on [`Tensor`]s (f32 or f64);
/// [`crate::autodiff::Tape`] records the same operations for reverse-mode
/// differentiation. Elementwise binary ops broadcast over unit dimensions
/// (`1 x c`, `r x 1`, `1 x 1`). Shape mismatches are programming errors and
/// panic; public entry points validate shapes before calling in.
pub trait Backend {
    type M: Clone;

    fn constant(&self, t: Tensor<f64>) -> Self::M;
    fn value(&self, m: &Self::M) -> Tensor<f64>;
    fn dims(&self, m: &Self::M) -> (usize, usize);

    fn matmul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn transpose(&self, a: &Self::M) -> Self::M;

    fn add(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn sub(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn mul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn div(&self, a: &Self::M, b: &Self::M) -> Self::M;

    fn scale(&self, a: &Self::M, s: f64) -> Self::M;
    fn add_scalar(&self, a: &Self::M, s: f64) -> Self::M;

    fn exp(&self, a: &Self::M) -> Self::M;
    fn cos(&self, a: &Self::M) -> Self::M;
    fn abs(&self, a: &Self::M) -> Self::M;
    fn powf(&self, a: &Self::M, p: f64) -> Self::M;
    fn sigmoid(&self, a: &Self::M) -> Self::M;
    fn softplus(&self, a: &Self::M) -> Self::M;
    fn gelu(&self, a: &Self::M) -> Self::M;

    /// Column sums as a `1 x c` row.
    fn sum_rows(&self, a: &Self::M) -> Self::M;
    /// Row sums as an `r x 1` column.
    fn sum_cols(&self, a: &Self::M) -> Self::M;
    fn sum_all(&self, a: &Self::M) -> Self::M;
    fn softmax_rows(&self, a: &Self::M) -> Self::M;

    fn slice_cols(&self, a: &Self::M, start: usize, end: usize) -> Self::M;
    fn concat_cols(&self, parts: &[Self::M]) -> Self::M;
    fn concat_rows(&self, parts: &[Self::M]) -> Self::M;

    fn causal_dwconv(&self, x: &Self::M, kernel: &Self::M) -> Self::M;
    /// `1 / a` where `a >= eps`, else 0.
    fn guarded_recip(&self, a: &Self::M, eps: f64) -> Self::M;
}

/// Immediate evaluation in precision `T`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager<T>(PhantomData<T>);

impl<T> Eager<T> {
    pub fn new() -> Self {
        Self(PhantomData)
    }
}

pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {:?} with {:?}", a, b)
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (r, c) = broadcast_shape((ar, ac), (br, bc));
    if (ar, ac) == (br, bc) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::matrix(r, c, data);
    }
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            data.push(f(ad[ia * ac + ja], bd[ib * bc + jb]));
        }
    }
    Tensor::matrix(r, c, data)
}

pub(crate) fn sum_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = a.dims();
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(out)
}

pub(crate) fn sum_cols<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::col_vector((0..a.rows()).map(|i| a.row(i).iter().copied().sum()).collect())
}

pub(crate) fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            assert_eq!(p.rows(), rows, "concat_cols row mismatch");
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, cols, data)
}

pub(crate) fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let cols = parts.first().map(|p| p.cols()).unwrap_or(0);
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        assert!(p.cols() == cols || p.is_empty(), "concat_rows col mismatch");
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, cols, data)
}

impl<T: Real> Backend for Eager<T> {
    type M = Tensor<T>;

    fn constant(&self, t: Tensor<f64>) -> Tensor<T> {
        t.cast()
    }

    fn value(&self, m: &Tensor<T>) -> Tensor<f64> {
        m.cast()
    }

    fn dims(&self, m: &Tensor<T>) -> (usize, usize) {
        m.dims()
    }

    fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::matmul(a, b).expect("matmul shape")
    }

    fn transpose(&self, a: &Tensor<T>) -> Tensor<T> {
        kernels::transpose(a)
    }

    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        broadcast_binary(a, b, |x, y| x + y)
    }

    fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        broadcast_binary(a, b, |x, y| x - y)
    }

    fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        broadcast_binary(a, b, |x, y| x * y)
    }

    fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        broadcast_binary(a, b, |x, y| x / y)
    }

    fn scale(&self, a: &Tensor<T>, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        a.map(|v| v * s)
    }

    fn add_scalar(&self, a: &Tensor<T>, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        a.map(|v| v + s)
    }

    fn exp(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(T::exp)
    }

    fn cos(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(T::cos)
    }

    fn abs(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(T::abs)
    }

    fn powf(&self, a: &Tensor<T>, p: f64) -> Tensor<T> {
        let p = T::from_f64(p);
        a.map(|v| v.powf(p))
    }

    fn sigmoid(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(kernels::sigmoid)
    }

    fn softplus(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(kernels::softplus)
    }

    fn gelu(&self, a: &Tensor<T>) -> Tensor<T> {
        a.map(kernels::gelu)
    }

    fn sum_rows(&self, a: &Tensor<T>) -> Tensor<T> {
        sum_rows(a)
    }

    fn sum_cols(&self, a: &Tensor<T>) -> Tensor<T> {
        sum_cols(a)
    }

    fn sum_all(&self, a: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(a.sum())
    }

    fn softmax_rows(&self, a: &Tensor<T>) -> Tensor<T> {
        kernels::softmax_rows(a)
    }

    fn slice_cols(&self, a: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
        a.slice_cols(start, end)
    }

    fn concat_cols(&self, parts: &[Tensor<T>]) -> Tensor<T> {
        concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn concat_rows(&self, parts: &[Tensor<T>]) -> Tensor<T> {
        concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn causal_dwconv(&self, x: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
        kernels::causal_dwconv(x, kernel).expect("dwconv shape")
    }

    fn guarded_recip(&self, a: &Tensor<T>, eps: f64) -> Tensor<T> {
        let eps = T::from_f64(eps);
        a.map(|v| if v >= eps { T::one() / v } else { T::zero() })
    }
}
