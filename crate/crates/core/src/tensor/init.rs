//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Element, Tensor};

/// Normal(0, std²) samples redrawn until they fall within two standard
/// deviations.
pub fn trunc_normal<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64_lossy(z * std);
        }
    })
}

/// He-normal initialization for ReLU layers with the given fan-in.
pub fn he_normal<T: Element, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
}
