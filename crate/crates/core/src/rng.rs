//! Counter-based, splittable random streams.
//!
//! A stream is identified by `(seed, stream id)`; its position is the word
//! counter of the underlying ChaCha20 block function. Any worker can derive a
//! child stream with [`RngStream::split`] without touching shared state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_counter(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn reset(&mut self) {
        self.set_counter(0);
    }

    /// Derives an independent child stream. Same parent and index always
    /// produce the same child, regardless of the parent's counter.
    pub fn split(&self, index: u64) -> RngStream {
        let child = splitmix64(self.stream ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)));
        RngStream::new(self.seed, child)
    }

    /// Derives a child from a path of indices.
    pub fn split_path(&self, path: &[u64]) -> RngStream {
        path.iter().fold(self.clone(), |r, &i| r.split(i))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// I.i.d. standard normal samples.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.normal())
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Fills `shape` with standard normals drawn from `rng`.
pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    rng.gaussian(shape)
}
