//! Test support: seeded synthetic sessions and brute-force oracles.
//!
//! The oracles re-derive every expected value by direct scanning and never
//! call into the alignment, ranking or filtering code they check.

pub mod oracle;
pub mod synth;

pub use rand_chacha::ChaCha8Rng as TestRng;

use rand::SeedableRng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}
