//! Named, independently seeded RNG streams derived from one master seed.
//!
//! Every source of randomness in a run (weight init, device placement,
//! fading, plan generation, data shuffling, ...) draws from its own stream,
//! so consuming extra values in one stream never perturbs another. Streams
//! are derived by a fixed split function:
//!
//! ```text
//! seed(name, idx...) = splitmix64(master ^ fnv1a(name) ^ mix(idx[0]) ^ ...)
//! ```
//!
//! where each index is pre-whitened with splitmix64 before xoring, and the
//! result seeds a ChaCha8 generator. Same master seed, name, and indices
//! always yield the same stream on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives per-purpose RNG streams from a single master seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master_seed: u64) -> Self {
        SeedTree {
            master: master_seed,
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// A stream identified by name alone ("init", "placement", ...).
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.stream_at(name, &[])
    }

    /// A stream identified by name plus indices, e.g. ("plan", [round, device]).
    pub fn stream_at(&self, name: &str, indices: &[u64]) -> ChaCha8Rng {
        let mut seed = self.master ^ fnv1a(name.as_bytes());
        for (pos, &idx) in indices.iter().enumerate() {
            // Mix in the position so ("x", [a, b]) differs from ("x", [b, a]).
            seed ^= splitmix64(
                idx.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(pos as u64 + 1)),
            );
        }
        ChaCha8Rng::seed_from_u64(splitmix64(seed))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
