use num_traits::Float;
use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// He-uniform initialisation: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = Float::sqrt(6.0 / fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
}
