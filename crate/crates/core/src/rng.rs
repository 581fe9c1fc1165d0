//! Seed-derivable random streams.
//!
//! Every stochastic step in the pipeline draws from a stream identified by a
//! path of labels, e.g. `root -> "user-17" -> "prompt" -> 3`. Streams are
//! derived by hashing the path into a ChaCha8 seed, so two streams with
//! different paths are independent and a stream never depends on how many
//! values were drawn from its siblings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Concrete generator handed to samplers.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed),
        }
    }

    /// Child stream named by a string label.
    pub fn child(&self, label: &str) -> Self {
        Self {
            state: splitmix64(self.state ^ splitmix64(fnv1a(label.as_bytes()))),
        }
    }

    /// Child stream named by an integer index.
    pub fn index(&self, i: u64) -> Self {
        Self {
            state: splitmix64(self.state.rotate_left(17) ^ splitmix64(i ^ 0xA5A5_A5A5)),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut s = self.state;
        for chunk in seed.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        StreamRng::from_seed(seed)
    }

    pub fn raw(&self) -> u64 {
        self.state
    }
}
