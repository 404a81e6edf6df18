use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

/// Seeded, position-addressable random source.
///
/// Backed by ChaCha8, whose output depends only on `(seed, stream, word position)`,
/// so draws are identical on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named sub-stream of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Current position in the stream, in 32-bit words.
    pub fn position(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    pub fn set_position(&mut self, position: u64) {
        self.inner.set_word_pos(position as u128);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_identical_sequences() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn position_rewinds() {
        let mut a = Rng::new(5);
        a.next_u64();
        let pos = a.position();
        let first = a.normal();
        a.normal();
        a.set_position(pos);
        assert_eq!(a.normal().to_bits(), first.to_bits());
    }

    #[test]
    fn streams_differ() {
        let base = Rng::new(1);
        let mut s1 = base.split(1);
        let mut s2 = base.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Snapshot of the first draw for seed 0; guards cross-platform stability.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = Rng::new(0);
        assert_eq!(first, again.next_u64());
        assert_eq!(first, FIRST_DRAW_SEED_0);
    }

    const FIRST_DRAW_SEED_0: u64 = 13080132717333068652;
}
