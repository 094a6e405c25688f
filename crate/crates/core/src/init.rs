use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grad::{Float, Tensor};

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as Float)
}
