//! Seeded random streams.
//!
//! Every stream is a xoshiro256++ generator seeded from the master seed with
//! `seed_from_u64` (SplitMix64 expansion) and then advanced by `id` calls to
//! `jump()`, giving non-overlapping sequences of 2^128 draws per purpose.
//! Streams count their 64-bit draws so a checkpoint can restore them exactly.

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub const ALGORITHM: &str = "xoshiro256++/jump";

/// Stream identifiers; each purpose draws from its own stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    InitEncoder = 0,
    InitDecoder = 1,
    InitRealFake = 2,
    InitDomain = 3,
    Selection = 4,
    Negatives = 5,
    Shuffle = 6,
    Split = 7,
    Synthetic = 8,
}

#[derive(Clone, Debug)]
pub struct Stream {
    seed: u64,
    id: u32,
    draws: u64,
    rng: Xoshiro256PlusPlus,
}

impl Stream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self::with_id(seed, purpose as u32)
    }

    pub fn with_id(seed: u64, id: u32) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..id {
            rng.jump();
        }
        Stream { seed, id, draws: 0, rng }
    }

    /// Recreate a stream positioned after `draws` 64-bit draws.
    pub fn restore(seed: u64, id: u32, draws: u64) -> Self {
        let mut s = Self::with_id(seed, id);
        for _ in 0..draws {
            s.next_u64();
        }
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand::rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restore_continues_the_sequence() {
        let mut a = Stream::new(7, Purpose::Selection);
        for _ in 0..13 {
            a.next_u32();
        }
        let mut b = Stream::restore(7, Purpose::Selection as u32, a.draws());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn purposes_are_distinct() {
        let mut a = Stream::new(7, Purpose::InitEncoder);
        let mut b = Stream::new(7, Purpose::InitDecoder);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
