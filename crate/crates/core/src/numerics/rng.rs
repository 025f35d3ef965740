use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8, so a given `(seed, stream)` pair yields the same
/// sequence on every platform. Independent sub-streams for per-sample work
/// are obtained with [`RngState::fork`].
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh stream derived from this state's seed. Streams with distinct
    /// ids never overlap; the current position of `self` is irrelevant.
    pub fn fork(&self, stream: u64) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Stream 0 is the parent's own stream.
        let id = stream.wrapping_add(1);
        rng.set_stream(id);
        RngState {
            seed: self.seed,
            stream: id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position inside the stream, in 32-bit words.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer on `lo..hi`.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..hi)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(0, i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.position(), b.position());
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut parent = RngState::new(7);
        let f1 = parent.fork(3);
        parent.normal();
        let f2 = parent.fork(3);
        let (mut f1, mut f2) = (f1, f2);
        assert_eq!(f1.next_u64(), f2.next_u64());
        let mut other = parent.fork(4);
        let mut f3 = parent.fork(3);
        assert_ne!(other.next_u64(), f3.next_u64());
    }

    #[test]
    fn frozen_first_draws() {
        // Guards against silent changes of the generator across upgrades.
        let mut r = RngState::new(0);
        assert_eq!(r.next_u64(), 13080132717333068652);
    }
}
