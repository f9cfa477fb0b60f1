//! Weight initializers. All draws come from a seeded ChaCha stream so model
//! construction is reproducible across platforms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type ModelRng = ChaCha8Rng;

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn scaled_uniform(rng: &mut ModelRng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn normal(rng: &mut ModelRng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}
