//! Parameter initialisation.

use alloc::vec::Vec;

use rand::Rng;

use super::Tensor;

/// `[fan_in, fan_out]` weights uniform in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let s = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::new(alloc::vec![fan_in, fan_out], data).expect("positive fan-in and fan-out")
}
