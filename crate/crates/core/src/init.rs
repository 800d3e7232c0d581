use rand::Rng;

use crate::numerics::{Scalar, Tensor};

/// Independent `U(-scale, scale)` entries.
pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..=scale)))
}
