//! Seeded random streams.
//!
//! Every stream is ChaCha8 keyed by the root seed, with the ChaCha stream
//! id selecting the purpose. Streams are independent of each other and
//! their position can be saved and restored exactly.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is the ChaCha stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Zoneout = 3,
    Data = 4,
    Analysis = 5,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    purpose: Purpose,
    inner: ChaCha8Rng,
}

/// Saved position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(purpose as u64);
        Self {
            seed,
            purpose,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: RngState) -> Option<Self> {
        let purpose = match state.stream {
            1 => Purpose::Init,
            2 => Purpose::Dropout,
            3 => Purpose::Zoneout,
            4 => Purpose::Data,
            5 => Purpose::Analysis,
            _ => return None,
        };
        let mut rng = Self::new(state.seed, purpose);
        rng.inner.set_word_pos(state.word_pos);
        Some(rng)
    }
}

impl RngCore for Rng {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_are_independent_streams() {
        let mut a = Rng::new(7, Purpose::Dropout);
        let mut b = Rng::new(7, Purpose::Zoneout);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn state_round_trip() {
        let mut a = Rng::new(42, Purpose::Zoneout);
        for _ in 0..37 {
            a.next_u32();
        }
        let mut b = Rng::restore(a.state()).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(1, Purpose::Data);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }
}
