//! Seed splitting. Every random draw in the crate comes from a generator
//! derived here from one root seed and a label naming its purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Root of a tree of independent generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    seed: u64,
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for a named sub-task.
    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream {
            seed: splitmix(self.seed ^ fnv1a(label).rotate_left(17)),
        }
    }

    /// Child stream for an indexed replica.
    pub fn index(&self, i: u64) -> SeedStream {
        SeedStream {
            seed: splitmix(self.seed.wrapping_add(splitmix(i ^ 0x5bd1_e995))),
        }
    }

    /// Generator for a named purpose.
    pub fn rng(&self, label: &str) -> Rng {
        ChaCha8Rng::seed_from_u64(self.child(label).seed)
    }
}
