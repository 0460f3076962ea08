//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Derives an independent stream for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Identity plus Gaussian noise, square.
pub fn near_identity<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Tensor<T> {
    let mut t = gaussian::<T>(rng, &[n, n], std);
    for i in 0..n {
        let v = &mut t.data_mut()[i * n + i];
        *v = *v + T::one();
    }
    t
}

/// CRC32 over the little-endian `f32` image of a sequence of tensors.
pub fn checksum<'a, T: Scalar>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for t in tensors {
        for v in t.data() {
            h.update(&(v.widen() as f32).to_le_bytes());
        }
    }
    h.finalize()
}
