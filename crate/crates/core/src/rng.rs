//! Named sub-seeds so every stochastic component draws from its own stream.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives independent seeds from one base seed and a component name.
/// Individual names can be pinned to explicit seeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedBank {
    pub base: u64,
    overrides: BTreeMap<String, u64>,
}

impl SeedBank {
    pub fn new(base: u64) -> Self {
        Self {
            base,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_overrides(base: u64, overrides: BTreeMap<String, u64>) -> Self {
        Self { base, overrides }
    }

    pub fn seed(&self, name: &str) -> u64 {
        if let Some(&s) = self.overrides.get(name) {
            return s;
        }
        // FNV-1a over the name, mixed with the base seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        splitmix64(self.base ^ splitmix64(h))
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.seed(name))
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
