use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Max-shifted softmax of a slice.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax along `axis`, every other axis treated as a batch index.
pub fn stable_softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::EmptyDimension(shape.to_vec()));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data()[at(k)];
            }
            for (k, v) in softmax_slice(&buf).into_iter().enumerate() {
                out.data_mut()[at(k)] = v;
            }
        }
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::sigmoid)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::silu)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::softplus)
}

/// Cosine similarity. Two zero vectors count as identical (1.0); a single
/// zero vector is orthogonal to everything (0.0).
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() && nb == T::zero() {
        return T::one();
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let c = dot / (na * nb).sqrt();
    c.max(-T::one()).min(T::one())
}
