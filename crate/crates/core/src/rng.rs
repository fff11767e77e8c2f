//! Named random sub-streams derived from a single scenario seed.
//!
//! Every consumer of randomness (arrivals, erasures, exploration, weight
//! initialisation, ...) asks for its own generator keyed by a label and an
//! optional index, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive_seed(&self, label: &str, index: u64) -> u64 {
        splitmix64(splitmix64(self.seed ^ fnv1a(label)).wrapping_add(splitmix64(index)))
    }

    pub fn rng(&self, label: &str) -> StreamRng {
        self.indexed(label, 0)
    }

    pub fn indexed(&self, label: &str, index: u64) -> StreamRng {
        StreamRng::seed_from_u64(self.derive_seed(label, index))
    }

    /// A child stream, used to give a sub-run (e.g. one protocol of a
    /// comparison) its own namespace.
    pub fn child(&self, label: &str) -> SeedStream {
        SeedStream::new(self.derive_seed(label, u64::MAX))
    }
}
