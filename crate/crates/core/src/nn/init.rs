use ndarray::{Array, Dimension, IntoDimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Scalar;
use crate::tensor::Tensor;

/// Half-width of the Glorot uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fans of a weight shape laid out as `(out, in, ...)`. A 1-D shape is
/// treated as a single output row.
fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (1, 1),
        [n] => (*n, 1),
        [out, inp, rest @ ..] => {
            let receptive: usize = rest.iter().product();
            (inp * receptive, out * receptive)
        }
    }
}

/// Draws a weight array of the given shape uniformly from `[-a, a]`,
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T, D, Sh>(shape: Sh, rng: &mut impl Rng) -> Array<T, D>
where
    T: Scalar,
    D: Dimension,
    Sh: IntoDimension<Dim = D>,
{
    let dim = shape.into_dimension();
    let (fan_in, fan_out) = fans(dim.slice());
    let a = xavier_bound(fan_in, fan_out);
    Array::from_shape_simple_fn(dim, || T::from_f64_lossy(rng.random_range(-a..=a)))
}

/// Seeded Xavier tensor with fans derived from `dims`.
pub fn xavier_init(dims: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arr: ndarray::ArrayD<f32> = xavier_uniform(dims.to_vec(), &mut rng);
    Tensor::new(dims.to_vec(), arr.into_raw_vec_and_offset().0)
}
