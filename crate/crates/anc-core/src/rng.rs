//! Seeded random source. Backed by ChaCha8, whose output stream depends only
//! on the seed, never on platform or thread count.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillDistribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; `stream` selects which one.
    pub fn split(&self, stream: u64) -> Rng {
        let mut inner = self.inner.clone();
        inner.set_stream(inner.get_stream().wrapping_add(stream.wrapping_add(1)));
        inner.set_word_pos(0);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, written out so the sequence is pinned to this crate
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn fill(&mut self, dims: &[usize], dist: FillDistribution) -> Result<DenseTensor> {
        let n: usize = dims.iter().product();
        let data = match dist {
            FillDistribution::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(invalid!("uniform needs finite lo < hi, got [{lo}, {hi})"));
                }
                (0..n)
                    .map(|_| {
                        let v = lo + (hi - lo) * self.next_f64();
                        // rounding can land exactly on hi
                        if v >= hi { lo } else { v }
                    })
                    .collect()
            }
            FillDistribution::Normal { mean, std } => {
                if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
                    return Err(invalid!("normal needs finite std > 0, got {std}"));
                }
                (0..n).map(|_| mean + std * self.next_normal()).collect()
            }
        };
        DenseTensor::new(dims, data)
    }

    pub fn uniform(&mut self, dims: &[usize], lo: f64, hi: f64) -> Result<DenseTensor> {
        self.fill(dims, FillDistribution::Uniform { lo, hi })
    }

    pub fn normal(&mut self, dims: &[usize], mean: f64, std: f64) -> Result<DenseTensor> {
        self.fill(dims, FillDistribution::Normal { mean, std })
    }
}
