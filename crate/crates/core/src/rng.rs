//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `(seed, domain)` and positioned on stream `index`:
//!
//! ```text
//! key    = seed.to_le_bytes() ++ domain.to_le_bytes() ++ [0u8; 16]
//! stream = index
//! ```
//!
//! `domain` separates unrelated consumers (initial conditions, noise, weight
//! init, minibatch shuffles) and `index` is the per-item substream, e.g. the
//! trajectory number. Results therefore do not depend on thread scheduling or
//! on how many items are drawn before a given one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumer tags for [`substream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    InitialConditions = 1,
    Noise = 2,
    WeightInit = 3,
    Shuffle = 4,
    /// Derivation of per-stage seeds from a top-level experiment seed.
    Stage = 5,
}

pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derive an independent child seed, e.g. one per training scale.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    substream(seed, Domain::Stage, index).next_u64()
}
