//! Seeded random streams.
//!
//! Every stage draws from its own named substream of a root seed, so that
//! e.g. changing the split does not perturb the model initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const ASSIGNMENT: &str = "assignment";
pub const PERMUTATION: &str = "permutation";
pub const SPLIT: &str = "split";
pub const SYNTHETIC: &str = "synthetic";
pub const REMOVAL: &str = "removal";
pub const ADAPTIVE: &str = "adaptive";
pub const RESEED: &str = "reseed";
pub const BENCH: &str = "bench";

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
