use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Deterministic random source.
///
/// Wraps ChaCha8, whose output stream is fully specified and identical on
/// every platform. A generator is addressed by `(seed, stream)`, so any
/// position in a training run can be recreated from those two numbers.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "Rng::below called with n = 0");
        self.inner.gen_range(0..n)
    }
}

/// I.i.d. standard-normal samples.
pub fn gaussian_sample<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lit::<T>(rng.gaussian())).collect();
    Tensor::from_parts(shape.to_vec(), data).expect("shape product matches")
}

/// I.i.d. samples from `[lo, hi)`. `lo == hi` yields a constant tensor.
pub fn uniform_sample<T: Real>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "uniform_sample requires lo <= hi, got [{lo}, {hi})"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = rng.uniform();
            lit::<T>(lo + (hi - lo) * u)
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
