//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

pub fn normal<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        R::lit(z * std)
    })
}

/// He-style normal with `std = gain / sqrt(fan_in)`.
pub fn fan_in<R: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<R> {
    normal(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}
