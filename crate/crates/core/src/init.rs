//! Seeded parameter initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian init: values are drawn in f64 and converted, so the stream
/// is identical for every scalar type and platform.
pub fn normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let values: Vec<S> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        })
        .collect();
    Tensor::new(shape, values).expect("normal init shape")
}

pub fn zeros<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    Tensor::zeros(shape)
}

pub fn ones<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![S::one(); n]).expect("ones shape")
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
