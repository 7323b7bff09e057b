//! Parameter initializers. All draws go through the caller's RNG so two
//! builds from the same seed are bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Tensor};

/// Kaiming-uniform fan-in initialization for a leaky-relu nonlinearity.
pub fn kaiming_uniform<E: Element>(
    shape: &[usize],
    fan_in: usize,
    negative_slope: f64,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let gain = (2.0 / (1.0 + negative_slope * negative_slope)).sqrt();
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data)
}

pub fn normal_init<E: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<E> {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::of_f64(dist.sample(rng))).collect();
    Tensor::param(shape, data)
}

pub fn zeros_param<E: Element>(shape: &[usize]) -> Tensor<E> {
    Tensor::param(shape, vec![E::zero(); shape.iter().product()])
}

pub fn ones_param<E: Element>(shape: &[usize]) -> Tensor<E> {
    Tensor::param(shape, vec![E::one(); shape.iter().product()])
}
