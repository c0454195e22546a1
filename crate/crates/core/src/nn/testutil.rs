use rand::Rng;

use crate::tensor::Tensor;

pub use crate::gradcheck::check_grad;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
